//! Global spatial prompting: concentric frequency-ring masks with learnable
//! band weights, applied to the centered spectrum of the input.
//!
//! The spectrum is split into `K` rings of equal radial width. Each ring gets
//! a differentiable mask built from two sigmoids of the distance-to-center
//! matrix, banded by radii `r_k = (k/K) * R_max`. A softmax over the
//! learnable weights `w_k` (scaled by a temperature) blends the ring masks
//! into one combined mask which multiplies the spectrum; the enhanced image
//! is the real part of the centered inverse transform.

use crate::spectral::{dft2_centered, idft2_centered, SpectrumTensor};
use crate::tensor::{sigmoid, softmax, Rng, Tensor};
use crate::{LgspError, Result};

/// How the per-ring sigmoid difference is written out.
///
/// The two spellings are algebraically identical (`-b*(d - r)` is exactly
/// `b*(r - d)`), so both produce the same masks; both are kept so either
/// reading of the band formula can be named in configs and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormulaMode {
    /// sigmoid(beta*(r_k - D)) - sigmoid(beta*(r_{k-1} - D))
    Annulus,
    /// sigmoid(-beta*(D - r_k)) - sigmoid(-beta*(D - r_{k-1}))
    Verbatim,
}

impl Default for FormulaMode {
    fn default() -> Self {
        FormulaMode::Annulus
    }
}

impl std::str::FromStr for FormulaMode {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annulus" => Ok(FormulaMode::Annulus),
            "verbatim" => Ok(FormulaMode::Verbatim),
            other => Err(LgspError::Config(format!("unknown formula mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FormulaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormulaMode::Annulus => write!(f, "annulus"),
            FormulaMode::Verbatim => write!(f, "verbatim"),
        }
    }
}

/// Distance from every pixel to the spectrum center (H/2, W/2), using real
/// division for the center coordinates.
pub fn distance_matrix(h: usize, w: usize) -> Result<Vec<f64>> {
    if h < 2 || w < 2 {
        return Err(LgspError::InvalidArgument(format!(
            "distance matrix needs dims >= 2, got {h}x{w}"
        )));
    }
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0;
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            d.push(((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt());
        }
    }
    Ok(d)
}

/// Equally spaced ring radii r_k = (k/K) * R_max, k = 1..K.
pub fn ring_radii(k_rings: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if k_rings == 0 {
        return Err(LgspError::InvalidArgument("ring count must be >= 1".into()));
    }
    let r_max = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    Ok((1..=k_rings)
        .map(|k| k as f64 / k_rings as f64 * r_max)
        .collect())
}

/// Ring geometry plus the learnable band weights.
#[derive(Debug, Clone)]
pub struct RingBank {
    h: usize,
    w: usize,
    k_rings: usize,
    beta: f64,
    tau: f64,
    mode: FormulaMode,
    radii: Vec<f64>,
    distance: Vec<f64>,
    masks: Vec<Vec<f64>>,
    /// Learnable band weights w_k; init N(0,1).
    pub weights: Vec<f64>,
}

impl RingBank {
    /// Builds the bank with normal-initialized weights.
    ///
    /// Dims must be even so the zero-distance pixel coincides with the
    /// centered zero-frequency bin.
    pub fn new(
        h: usize,
        w: usize,
        k_rings: usize,
        beta: f64,
        tau: f64,
        mode: FormulaMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weights = (0..k_rings).map(|_| rng.next_normal()).collect();
        Self::with_weights(h, w, k_rings, beta, tau, mode, weights)
    }

    pub fn with_weights(
        h: usize,
        w: usize,
        k_rings: usize,
        beta: f64,
        tau: f64,
        mode: FormulaMode,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(LgspError::InvalidArgument(format!(
                "ring bank needs even dims >= 2, got {h}x{w}"
            )));
        }
        if !(beta > 0.0) {
            return Err(LgspError::InvalidArgument(format!(
                "sharpness must be positive, got {beta}"
            )));
        }
        if !(tau > 0.0) {
            return Err(LgspError::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        if weights.len() != k_rings {
            return Err(LgspError::ShapeMismatch {
                expected: vec![k_rings],
                got: vec![weights.len()],
            });
        }
        let radii = ring_radii(k_rings, h, w)?;
        let distance = distance_matrix(h, w)?;
        let masks = (1..=k_rings)
            .map(|k| eval_ring_mask(&distance, &radii, k, beta, mode))
            .collect();
        Ok(Self {
            h,
            w,
            k_rings,
            beta,
            tau,
            mode,
            radii,
            distance,
            masks,
            weights,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn k_rings(&self) -> usize {
        self.k_rings
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mode(&self) -> FormulaMode {
        self.mode
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn distance(&self) -> &[f64] {
        &self.distance
    }

    /// Differentiable mask for ring `k` (1-based).
    pub fn ring_mask(&self, k: usize) -> Result<&[f64]> {
        if k == 0 || k > self.k_rings {
            return Err(LgspError::IndexOutOfRange(format!(
                "ring {k} of {}",
                self.k_rings
            )));
        }
        Ok(&self.masks[k - 1])
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    /// softmax(w_k * tau) over the band weights.
    pub fn softmax_weights(&self) -> Vec<f64> {
        self.softmax_weights_for(&self.weights)
    }

    pub fn softmax_weights_for(&self, weights: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = weights.iter().map(|w| w * self.tau).collect();
        softmax(&scaled, 1.0).expect("weights validated at construction")
    }

    /// The blended mask: sum_k softmax(w tau)_k * M_k.
    pub fn combined_mask(&self) -> Vec<f64> {
        self.combined_mask_for(&self.weights)
    }

    pub fn combined_mask_for(&self, weights: &[f64]) -> Vec<f64> {
        let s = self.softmax_weights_for(weights);
        let mut out = vec![0.0; self.h * self.w];
        for (k, mask) in self.masks.iter().enumerate() {
            let wk = s[k];
            for (o, m) in out.iter_mut().zip(mask) {
                *o += wk * m;
            }
        }
        out
    }

    /// Closed form of sum_k M_k: the telescoped band expression
    /// sigmoid(-beta*(D - r_K)) - sigmoid(-beta*D).
    pub fn telescoped_mask(&self) -> Vec<f64> {
        let r_last = self.radii[self.k_rings - 1];
        self.distance
            .iter()
            .map(|&d| sigmoid(-self.beta * (d - r_last)) - sigmoid(-self.beta * d))
            .collect()
    }
}

fn eval_ring_mask(
    distance: &[f64],
    radii: &[f64],
    k: usize,
    beta: f64,
    mode: FormulaMode,
) -> Vec<f64> {
    let r_hi = radii[k - 1];
    let r_lo = if k == 1 { 0.0 } else { radii[k - 2] };
    distance
        .iter()
        .map(|&d| match mode {
            FormulaMode::Annulus => sigmoid(beta * (r_hi - d)) - sigmoid(beta * (r_lo - d)),
            FormulaMode::Verbatim => sigmoid(-beta * (d - r_hi)) - sigmoid(-beta * (d - r_lo)),
        })
        .collect()
}

/// Output of the global enhancement path.
#[derive(Debug, Clone)]
pub struct EnhanceOutput {
    /// Real-space enhanced image (the global spatial prompt).
    pub x_global: Tensor,
    /// Masked centered spectrum.
    pub f_enhanced: SpectrumTensor,
    /// Largest imaginary magnitude discarded during reconstruction.
    pub max_imag_residue: f64,
}

/// Enhances `x` with the bank's current combined mask.
pub fn enhance(x: &Tensor, bank: &RingBank) -> Result<EnhanceOutput> {
    enhance_with_mask(x, bank, &bank.combined_mask())
}

/// Same pipeline with an explicit mask; lets tests force mask == 1 and lets
/// the training tape substitute a mask built from live weights.
pub fn enhance_with_mask(x: &Tensor, bank: &RingBank, mask: &[f64]) -> Result<EnhanceOutput> {
    let shape = x.shape();
    if shape.len() != 4 || shape[2] != bank.h || shape[3] != bank.w {
        return Err(LgspError::ShapeMismatch {
            expected: vec![0, 0, bank.h, bank.w],
            got: shape.to_vec(),
        });
    }
    let spectrum = dft2_centered(x)?;
    let f_enhanced = spectrum.mul_real_mask(mask)?;
    let (x_global, max_imag_residue) = idft2_centered(&f_enhanced)?;
    Ok(EnhanceOutput {
        x_global,
        f_enhanced,
        max_imag_residue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(h: usize, w: usize, k: usize, beta: f64) -> RingBank {
        let mut rng = Rng::new(9);
        RingBank::new(h, w, k, beta, 1.0, FormulaMode::Annulus, &mut rng).unwrap()
    }

    #[test]
    fn distance_matrix_2x2() {
        let d = distance_matrix(2, 2).unwrap();
        let expected = [std::f64::consts::SQRT_2, 1.0, 1.0, 0.0];
        for (got, want) in d.iter().zip(expected) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn distance_matrix_center_and_corner() {
        for (h, w) in [(4, 4), (8, 16), (32, 32)] {
            let d = distance_matrix(h, w).unwrap();
            let center = d[(h / 2) * w + w / 2];
            assert_eq!(center, 0.0);
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(min, 0.0);
        }
        let d = distance_matrix(32, 32).unwrap();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((max - 22.62742).abs() < 1e-4);
        assert_eq!(d[0], max);
    }

    #[test]
    fn radii_basics() {
        let r = ring_radii(2, 2, 2).unwrap();
        assert!((r[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert!((r[1] - std::f64::consts::SQRT_2).abs() < 1e-5);

        let r = ring_radii(1, 8, 8).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0] - 32.0f64.sqrt()).abs() < 1e-12);

        let r = ring_radii(4, 32, 32).unwrap();
        for (got, want) in r.iter().zip([5.65685, 11.31371, 16.97056, 22.62742]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!(ring_radii(0, 8, 8).is_err());
    }

    #[test]
    fn radii_strictly_increasing_up_to_r_max() {
        let b = bank(16, 16, 8, 10.0);
        let r = b.radii();
        for i in 1..r.len() {
            assert!(r[i] > r[i - 1]);
        }
        let r_max = (8.0f64 * 8.0 + 8.0 * 8.0).sqrt();
        assert!((r[r.len() - 1] - r_max).abs() < 1e-12);
    }

    #[test]
    fn ring_mask_boundary_value() {
        // At D == r_k the leading sigmoid is exactly 0.5.
        let b = bank(16, 16, 2, 10.0);
        let r1 = b.radii()[0];
        let m = sigmoid(b.beta() * (r1 - r1));
        assert_eq!(m, 0.5);
    }

    #[test]
    fn ring_mask_direct_scalar_evaluation() {
        // beta=10, radii of a 2x2 bank are [0.70711, 1.41421]; at D=0.5 the
        // first band evaluates to sigmoid(2.0711) - sigmoid(-5.0).
        let radii = ring_radii(2, 2, 2).unwrap();
        let beta = 10.0;
        let d = 0.5;
        let m1 = sigmoid(beta * (radii[0] - d)) - sigmoid(beta * (0.0 - d));
        let expected = 0.88809 - 0.00669;
        assert!((m1 - expected).abs() < 1e-4, "got {m1}");
    }

    #[test]
    fn verbatim_and_annulus_modes_agree() {
        let mut rng = Rng::new(4);
        let w: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let a =
            RingBank::with_weights(16, 16, 6, 10.0, 1.0, FormulaMode::Annulus, w.clone()).unwrap();
        let v = RingBank::with_weights(16, 16, 6, 10.0, 1.0, FormulaMode::Verbatim, w).unwrap();
        for k in 1..=6 {
            let (ma, mv) = (a.ring_mask(k).unwrap(), v.ring_mask(k).unwrap());
            for (x, y) in ma.iter().zip(mv) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn masks_telescope_exactly() {
        for k_rings in [1, 4, 8, 100] {
            let b = bank(32, 32, k_rings, 10.0);
            let telescoped = b.telescoped_mask();
            let mut sum = vec![0.0; 32 * 32];
            for k in 1..=k_rings {
                for (s, m) in sum.iter_mut().zip(b.ring_mask(k).unwrap()) {
                    *s += m;
                }
            }
            for (s, t) in sum.iter().zip(&telescoped) {
                assert!((s - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combined_mask_matches_scratch_reweighting() {
        let mut rng = Rng::new(77);
        let b = RingBank::new(16, 16, 8, 10.0, 1.0, FormulaMode::Annulus, &mut rng).unwrap();
        let combined = b.combined_mask();
        // scratch: softmax by hand, then accumulate mask-by-mask
        let mx = b.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = b.weights.iter().map(|w| (w - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut scratch = vec![0.0; 256];
        for k in 1..=8 {
            let wk = exps[k - 1] / z;
            for (o, m) in scratch.iter_mut().zip(b.ring_mask(k).unwrap()) {
                *o += wk * m;
            }
        }
        for (a, s) in combined.iter().zip(&scratch) {
            assert!((a - s).abs() < 1e-12);
        }
        let sw: f64 = b.softmax_weights().iter().sum();
        assert!((sw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_weights_give_scaled_telescoped_mask() {
        let b = RingBank::with_weights(16, 16, 4, 10.0, 1.0, FormulaMode::Annulus, vec![0.3; 4])
            .unwrap();
        let combined = b.combined_mask();
        let telescoped = b.telescoped_mask();
        for (c, t) in combined.iter().zip(&telescoped) {
            assert!((c - t / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_ring_combined_equals_its_mask() {
        let b =
            RingBank::with_weights(8, 8, 1, 10.0, 1.0, FormulaMode::Annulus, vec![-1.3]).unwrap();
        assert_eq!(b.softmax_weights(), vec![1.0]);
        let combined = b.combined_mask();
        for (c, m) in combined.iter().zip(b.ring_mask(1).unwrap()) {
            assert_eq!(c, m);
        }
    }

    #[test]
    fn radial_symmetry_of_combined_mask() {
        let b = bank(32, 32, 8, 10.0);
        let combined = b.combined_mask();
        let d = b.distance();
        // group pixels by distance; equal distance must give equal mask value
        let mut seen: Vec<(f64, f64)> = Vec::new();
        for i in 0..combined.len() {
            if let Some(&(_, v)) = seen.iter().find(|(dist, _)| (dist - d[i]).abs() < 1e-12) {
                assert!(
                    (combined[i] - v).abs() < 1e-12,
                    "asymmetry at distance {}",
                    d[i]
                );
            } else {
                seen.push((d[i], combined[i]));
            }
        }
    }

    #[test]
    fn sharpening_approaches_indicator() {
        // telescoped mask at interior points tends to 1 as beta grows
        let mut prev_gap = f64::INFINITY;
        for beta in [10.0, 100.0, 1000.0] {
            let b = bank(32, 32, 8, beta);
            let telescoped = b.telescoped_mask();
            let d = b.distance();
            let r_last = b.radii()[7];
            let gap = telescoped
                .iter()
                .zip(d)
                .filter(|(_, &dist)| dist > 0.0 && dist < r_last)
                .map(|(t, _)| (1.0 - t).abs())
                .fold(0.0f64, f64::max);
            assert!(
                gap < prev_gap || (gap == 0.0 && prev_gap == 0.0),
                "beta={beta}: {gap} !<= {prev_gap}"
            );
            prev_gap = gap;
        }
    }

    #[test]
    fn enhance_zero_image_is_zero() {
        let b = bank(8, 8, 4, 10.0);
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let out = enhance(&x, &b).unwrap();
        assert_eq!(out.x_global.data(), x.data());
    }

    #[test]
    fn identity_mask_reconstructs_input() {
        let b = bank(16, 16, 4, 10.0);
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[2, 1, 16, 16], &mut rng);
        let ones = vec![1.0; 256];
        let out = enhance_with_mask(&x, &b, &ones).unwrap();
        assert!(x.max_abs_diff(&out.x_global).unwrap() < 1e-9);
        assert!(out.max_imag_residue <= 1e-9);
    }

    #[test]
    fn enhance_matches_scratch_pipeline() {
        use crate::spectral::{dft2_centered, idft2_centered};
        let b = RingBank::with_weights(16, 16, 4, 10.0, 1.0, FormulaMode::Annulus, vec![0.0; 4])
            .unwrap();
        let mut rng = Rng::new(13);
        let x = Tensor::randn(&[1, 1, 16, 16], &mut rng);
        let out = enhance(&x, &b).unwrap();

        // scratch: telescoped/K mask applied by hand
        let mask: Vec<f64> = b.telescoped_mask().iter().map(|t| t / 4.0).collect();
        let s = dft2_centered(&x).unwrap().mul_real_mask(&mask).unwrap();
        let (want, _) = idft2_centered(&s).unwrap();
        assert!(out.x_global.max_abs_diff(&want).unwrap() < 1e-9);
        assert!(out.max_imag_residue <= 1e-9);
    }

    #[test]
    fn enhance_rejects_dim_mismatch() {
        let b = bank(8, 8, 4, 10.0);
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(enhance(&x, &b).is_err());
    }

    #[test]
    fn mask_index_out_of_range() {
        let b = bank(8, 8, 4, 10.0);
        assert!(b.ring_mask(0).is_err());
        assert!(b.ring_mask(5).is_err());
    }
}
