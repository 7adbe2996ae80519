//! Synthetic dataset generation.
//!
//! Each class is a shared smooth background plus three class-specific
//! components chosen so both prompting branches have signal to find: a small
//! smooth template perturbation, a band-limited frequency signature (a plane
//! wave whose radial frequency and orientation depend on the class), and a
//! local motif patch stamped at a class-specific position. Samples add
//! per-sample Gaussian noise on top. Everything derives from the seed, so a
//! regenerated directory is byte-identical.

use std::path::{Path, PathBuf};

use super::config::DataConfig;
use super::tensorfile::{read_tensor, write_tensor, Dtype};
use crate::protocol::{DatasetItem, Split};
use crate::tensor::{Rng, Tensor};
use crate::{LgspError, Result};

fn smooth_field(n: usize, rng: &mut Rng) -> Vec<f64> {
    // sum of a few random low-frequency plane waves
    let mut field = vec![0.0; n * n];
    for _ in 0..3 {
        let fy = rng.next_below(3) as f64;
        let fx = 1.0 + rng.next_below(2) as f64;
        let phase = rng.next_f64() * std::f64::consts::TAU;
        let amp = 0.5 + 0.5 * rng.next_f64();
        for y in 0..n {
            for x in 0..n {
                let a = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / n as f64 + phase;
                field[y * n + x] += amp * a.sin();
            }
        }
    }
    field
}

/// Class-specific plane wave in a mid/high frequency band. The radial
/// frequency cycles over five bands and the orientation advances with the
/// class index, giving every class a distinct centered-spectrum location.
fn frequency_signature(n: usize, class: usize, amp: f64, rng: &mut Rng) -> Vec<f64> {
    let radius = 3.0 + 2.0 * (class % 5) as f64;
    let theta = (class / 5) as f64 * 0.7 + 0.4;
    let fy = (radius * theta.sin()).round();
    let fx = (radius * theta.cos()).round();
    let phase = rng.next_f64() * std::f64::consts::TAU;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let a = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / n as f64 + phase;
            out[y * n + x] = amp * a.cos();
        }
    }
    out
}

/// Noiseless class image: shared background + template perturbation +
/// frequency signature + motif stamp.
pub fn class_template(cfg: &DataConfig, seed: u64, class: usize) -> Tensor {
    let n = cfg.img;
    let root = Rng::new(seed);
    let mut shared_rng = root.derive(1);
    let shared = smooth_field(n, &mut shared_rng);

    let mut class_rng = root.derive(100 + class as u64);
    let perturb = smooth_field(n, &mut class_rng);
    let signature = frequency_signature(n, class, cfg.freq_amp, &mut class_rng);

    // motif: a +-1 patch at a class-dependent position
    let m = cfg.motif;
    let py = (class * 7) % (n - m);
    let px = (class * 13) % (n - m);
    let motif: Vec<f64> = (0..m * m)
        .map(|_| if class_rng.next_f64() < 0.5 { -1.0 } else { 1.0 })
        .collect();

    let mut img = vec![0.0; n * n];
    for i in 0..n * n {
        img[i] = shared[i] + cfg.template_amp * perturb[i] + signature[i];
    }
    for my in 0..m {
        for mx in 0..m {
            img[(py + my) * n + (px + mx)] += cfg.motif_amp * motif[my * m + mx];
        }
    }
    let mut data = Vec::with_capacity(cfg.channels * n * n);
    for _ in 0..cfg.channels {
        data.extend_from_slice(&img);
    }
    Tensor::new(vec![1, cfg.channels, n, n], data).expect("finite template")
}

/// Per-sample noise: a mix of white noise and a high-pass-filtered field.
/// With most energy above half the maximum radius, band suppression can
/// actually remove it while the class signatures (low/mid rings) survive.
fn noise_field(cfg: &DataConfig, rng: &mut Rng) -> Tensor {
    let shape = [1, cfg.channels, cfg.img, cfg.img];
    let white = Tensor::randn(&shape, rng);
    if cfg.noise_highpass <= 0.0 {
        return white.scale(cfg.noise);
    }
    let raw = Tensor::randn(&shape, rng);
    let spectrum = crate::spectral::dft2_centered(&raw).expect("even dims");
    let n = cfg.img;
    let distance = crate::gsp::distance_matrix(n, n).expect("valid dims");
    let r_max = ((n as f64 / 2.0).powi(2) * 2.0).sqrt();
    let mask: Vec<f64> = distance
        .iter()
        .map(|&d| if d >= 0.5 * r_max { 1.0 } else { 0.0 })
        .collect();
    let masked = spectrum.mul_real_mask(&mask).expect("mask sized");
    let (high, _) = crate::spectral::idft2_centered(&masked).expect("inverse");
    // rescale the surviving band back to unit-ish variance
    let kept: f64 = mask.iter().sum::<f64>() / mask.len() as f64;
    let high = high.scale(1.0 / kept.sqrt().max(1e-6));
    let frac = cfg.noise_highpass.min(1.0);
    white
        .scale(cfg.noise * (1.0 - frac))
        .add(&high.scale(cfg.noise * frac))
        .expect("matching shapes")
}

fn noisy_sample(template: &Tensor, cfg: &DataConfig, rng: &mut Rng) -> Tensor {
    template.add(&noise_field(cfg, rng)).expect("matching shapes")
}

/// Writes the dataset directory: `samples/*.lgsp` plus `manifest.csv` with
/// columns id,class,split,file.
pub fn generate(cfg: &DataConfig, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    let mut manifest = String::from("id,class,split,file\n");
    let mut id = 0usize;
    let root = Rng::new(seed);

    let mut emit = |id: &mut usize,
                    class: usize,
                    split: Split,
                    template: &Tensor|
     -> Result<()> {
        let mut rng = root.derive(0x5a0000 + *id as u64);
        let sample = noisy_sample(template, cfg, &mut rng);
        let file = format!("samples/{:05}.lgsp", *id);
        write_tensor(&out_dir.join(&file), &sample, Dtype::F64)?;
        manifest.push_str(&format!("{},{},{},{}\n", *id, class, split, file));
        *id += 1;
        Ok(())
    };

    for class in 0..cfg.classes {
        let template = class_template(cfg, seed, class);
        for _ in 0..cfg.train_per_class {
            emit(&mut id, class, Split::Train, &template)?;
        }
        for _ in 0..cfg.test_per_class {
            emit(&mut id, class, Split::Test, &template)?;
        }
    }
    // pretext classes live after the benchmark classes
    for p in 0..cfg.pretext_classes {
        let class = cfg.classes + p;
        let template = class_template(cfg, seed, class);
        for _ in 0..cfg.pretext_per_class {
            emit(&mut id, class, Split::Pretext, &template)?;
        }
    }
    std::fs::write(out_dir.join("manifest.csv"), manifest)?;
    Ok(out_dir.to_path_buf())
}

/// Loads a generated directory back into dataset items.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetItem>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))
        .map_err(|e| LgspError::Config(format!("cannot read manifest in {dir:?}: {e}")))?;
    let mut items = Vec::new();
    for line in manifest.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(LgspError::Format(format!("bad manifest row {line:?}")));
        }
        let id = fields[0]
            .parse()
            .map_err(|e| LgspError::Format(format!("bad id {:?}: {e}", fields[0])))?;
        let class = fields[1]
            .parse()
            .map_err(|e| LgspError::Format(format!("bad class {:?}: {e}", fields[1])))?;
        let split: Split = fields[2].parse()?;
        let data = read_tensor(&dir.join(fields[3]))?;
        items.push(DatasetItem {
            id,
            class,
            split,
            data,
        });
    }
    if items.is_empty() {
        return Err(LgspError::EmptyInput(format!("dataset at {dir:?}")));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DataConfig {
        DataConfig {
            dir: String::new(),
            classes: 2,
            train_per_class: 1,
            test_per_class: 0,
            pretext_classes: 0,
            pretext_per_class: 0,
            img: 16,
            channels: 1,
            noise: 0.3,
            noise_highpass: 0.7,
            motif: 5,
            motif_amp: 1.5,
            freq_amp: 0.9,
            template_amp: 0.3,
        }
    }

    #[test]
    fn two_classes_one_sample_each() {
        let dir = tempfile::tempdir().unwrap();
        generate(&tiny_cfg(), 3, dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let rows: Vec<&str> = manifest.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        let items = load_dataset(dir.path()).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].data.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn same_seed_gives_bit_identical_directories() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.classes = 3;
        cfg.train_per_class = 2;
        cfg.test_per_class = 1;
        generate(&cfg, 11, a.path()).unwrap();
        generate(&cfg, 11, b.path()).unwrap();
        let ma = std::fs::read(a.path().join("manifest.csv")).unwrap();
        let mb = std::fs::read(b.path().join("manifest.csv")).unwrap();
        assert_eq!(ma, mb);
        for entry in std::fs::read_dir(a.path().join("samples")).unwrap() {
            let name = entry.unwrap().file_name();
            let fa = std::fs::read(a.path().join("samples").join(&name)).unwrap();
            let fb = std::fs::read(b.path().join("samples").join(&name)).unwrap();
            assert_eq!(fa, fb, "file {name:?}");
        }
    }

    #[test]
    fn different_seed_changes_data() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&tiny_cfg(), 1, a.path()).unwrap();
        generate(&tiny_cfg(), 2, b.path()).unwrap();
        let fa = std::fs::read(a.path().join("samples/00000.lgsp")).unwrap();
        let fb = std::fs::read(b.path().join("samples/00000.lgsp")).unwrap();
        assert_ne!(fa, fb);
    }

    #[test]
    fn templates_of_distinct_classes_are_separated() {
        // margin frozen from the committed benchmark seed (42); see the
        // acceptance suite for the full-size check
        let mut cfg = tiny_cfg();
        cfg.classes = 12;
        cfg.img = 32;
        let mut min_l2 = f64::INFINITY;
        for a in 0..12 {
            let ta = class_template(&cfg, 42, a);
            for b in (a + 1)..12 {
                let tb = class_template(&cfg, 42, b);
                let l2 = ta.sub(&tb).unwrap().norm();
                min_l2 = min_l2.min(l2);
            }
        }
        assert!(min_l2 > 1.0, "templates nearly collide: min L2 {min_l2}");
    }
}
