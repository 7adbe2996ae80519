//! PGM and CSV exports: ring masks, local prompt outputs, selection-weight
//! histograms, and attention heatmaps.

use std::path::Path;

use super::tensorfile::{write_tensor, Dtype};
use crate::model::{LgspModel, ModelVariant};
use crate::protocol::Sample;
use crate::tensor::Tensor;
use crate::{LgspError, Result};

/// 8-bit binary PGM (P5), min-max normalized per image. A constant image
/// maps to all zeros.
pub fn pgm_bytes(w: usize, h: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != w * h {
        return Err(LgspError::ShapeMismatch {
            expected: vec![w * h],
            got: vec![values.len()],
        });
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in values {
        let byte = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        };
        out.push(byte);
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_bytes(w, h, values)?)?;
    Ok(())
}

fn write_value_csv(path: &Path, w: usize, values: &[f64]) -> Result<()> {
    let mut out = String::new();
    for row in values.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes each ring mask and the combined mask as PGM plus a raw f64 tensor
/// file. Produces `k_rings + 1` mask images.
pub fn export_masks(model: &LgspModel, out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let bank = &model.gsp_bank;
    let (h, w) = bank.dims();
    let mut count = 0;
    for k in 1..=bank.k_rings() {
        let mask = bank.ring_mask(k)?;
        write_pgm(&out_dir.join(format!("mask_ring_{k:03}.pgm")), w, h, mask)?;
        let t = Tensor::new(vec![h, w], mask.to_vec())?;
        write_tensor(
            &out_dir.join(format!("mask_ring_{k:03}.lgsp")),
            &t,
            Dtype::F64,
        )?;
        count += 1;
    }
    let combined = bank.combined_mask_for(model.gsp_weights.data());
    write_pgm(&out_dir.join("mask_combined.pgm"), w, h, &combined)?;
    write_tensor(
        &out_dir.join("mask_combined.lgsp"),
        &Tensor::new(vec![h, w], combined)?,
        Dtype::F64,
    )?;
    count += 1;
    Ok(count)
}

/// Writes every pool entry's prompt output for `sample` as a PGM heatmap
/// (channel-mean) and a histogram CSV of similarities and selection weights.
pub fn export_local_prompts(model: &LgspModel, sample: &Sample, out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let [_, c, h, w] = match *sample.data.shape() {
        [b, c, hh, ww] => [b, c, hh, ww],
        _ => {
            return Err(LgspError::ShapeMismatch {
                expected: vec![1, 0, 0, 0],
                got: sample.data.shape().to_vec(),
            })
        }
    };
    let mut rng = crate::tensor::Rng::new(0);
    let mut count = 0;
    for (i, entry) in model.lsp_pool.entries.iter().enumerate() {
        let prompt = crate::lsp::generate_prompt(entry, &sample.data, false, &mut rng)?;
        // channel mean
        let mut plane = vec![0.0; h * w];
        for ch in 0..c {
            for p in 0..h * w {
                plane[p] += prompt.data()[ch * h * w + p] / c as f64;
            }
        }
        write_pgm(&out_dir.join(format!("prompt_{i:03}.pgm")), w, h, &plane)?;
        write_value_csv(&out_dir.join(format!("prompt_{i:03}.csv")), w, &plane)?;
        count += 1;
    }

    // similarity / weight histogram for this sample
    let raw = model.eval_query(sample)?;
    let sims = model.lsp_pool.similarities(&raw)?;
    let selected = crate::lsp::select_topk(&raw, &model.lsp_pool)?;
    let weights = crate::lsp::selection_weights(&raw, &model.lsp_pool, &selected)?;
    let mut csv = String::from("entry,similarity,selected,weight\n");
    for (i, s) in sims.iter().enumerate() {
        let w = selected
            .iter()
            .position(|&j| j == i)
            .map(|pos| weights[pos])
            .unwrap_or(0.0);
        let sel = selected.contains(&i) as u8;
        csv.push_str(&format!("{i},{s},{sel},{w}\n"));
    }
    std::fs::write(out_dir.join("selection_weights.csv"), csv)?;
    Ok(count)
}

/// Attention heatmaps for the class token (`cls`) or each prompt row
/// (`prompts`), one PGM + raw CSV per layer and query token.
pub fn export_attention(
    model: &LgspModel,
    sample: &Sample,
    what: &str,
    out_dir: &Path,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let query = match model.cfg.variant {
        ModelVariant::TokenPool => Some(model.eval_raw_feature(sample)?),
        _ => None,
    };
    let mut count = 0;
    for layer in 0..model.cfg.vit.n_layers {
        let tokens: Vec<usize> = match what {
            "cls" => vec![0],
            "prompts" => {
                let fwd =
                    model
                        .backbone
                        .forward(&sample.data, &model.token_prompts, false, query.as_deref())?;
                (1..=fwd.inserted[layer]).collect()
            }
            other => {
                return Err(LgspError::InvalidArgument(format!(
                    "unknown attention export target {other:?}"
                )))
            }
        };
        for tok in tokens {
            let (gh, gw, map) = model.backbone.attention_map(
                &sample.data,
                &model.token_prompts,
                layer,
                tok,
                query.as_deref(),
            )?;
            let stem = format!("attn_l{layer}_t{tok:03}");
            write_pgm(&out_dir.join(format!("{stem}.pgm")), gw, gh, &map)?;
            write_value_csv(&out_dir.join(format!("{stem}.csv")), gw, &map)?;
            count += 1;
        }
    }
    Ok(count)
}
