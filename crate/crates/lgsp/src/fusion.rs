//! Residual fusion of the input with the local prompt and the global
//! enhancement: `x_final = x + alpha_l * p_local + alpha_g * x_global`.

use crate::tensor::Tensor;
use crate::{LgspError, Result};

/// Whether the two scalars are free or tied to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    Independent,
    /// alpha_g is parameterized as 1 - alpha_l, so the sum is exact.
    FixedSum,
}

impl std::str::FromStr for ConstraintMode {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(ConstraintMode::Independent),
            "fixed_sum" => Ok(ConstraintMode::FixedSum),
            other => Err(LgspError::Config(format!(
                "unknown constraint mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintMode::Independent => write!(f, "independent"),
            ConstraintMode::FixedSum => write!(f, "fixed_sum"),
        }
    }
}

/// Learnable balance between the local and global branches. In fixed-sum
/// mode only `alpha_l` is stored as a free parameter.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub alpha_l: Tensor,
    alpha_g_free: Tensor,
    pub constraint_mode: ConstraintMode,
}

impl FusionParams {
    pub fn new(alpha_l: f64, alpha_g: f64, constraint_mode: ConstraintMode) -> Self {
        Self {
            alpha_l: Tensor::full(&[1], alpha_l),
            alpha_g_free: Tensor::full(&[1], alpha_g),
            constraint_mode,
        }
    }

    pub fn alpha_l(&self) -> f64 {
        self.alpha_l.data()[0]
    }

    pub fn alpha_g(&self) -> f64 {
        match self.constraint_mode {
            ConstraintMode::Independent => self.alpha_g_free.data()[0],
            ConstraintMode::FixedSum => 1.0 - self.alpha_l.data()[0],
        }
    }

    /// The free alpha_g tensor; meaningful only in independent mode.
    pub fn alpha_g_param(&self) -> &Tensor {
        &self.alpha_g_free
    }

    pub fn alpha_g_param_mut(&mut self) -> &mut Tensor {
        &mut self.alpha_g_free
    }

    /// Disjoint mutable access to both scalars.
    pub fn split_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.alpha_l, &mut self.alpha_g_free)
    }
}

/// Eq-style residual combination with explicit scalars.
pub fn fuse(
    x: &Tensor,
    p_local: &Tensor,
    x_global: &Tensor,
    params: &FusionParams,
) -> Result<Tensor> {
    if x.shape() != p_local.shape() || x.shape() != x_global.shape() {
        return Err(LgspError::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: if x.shape() != p_local.shape() {
                p_local.shape().to_vec()
            } else {
                x_global.shape().to_vec()
            },
        });
    }
    x.add(&p_local.scale(params.alpha_l()))?
        .add(&x_global.scale(params.alpha_g()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn zero_alphas_are_the_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let p = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let g = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let params = FusionParams::new(0.0, 0.0, ConstraintMode::Independent);
        let out = fuse(&x, &p, &g, &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_local_prompt_with_unit_alpha_is_identity() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let p = Tensor::zeros(&[1, 1, 4, 4]);
        let g = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let params = FusionParams::new(1.0, 0.0, ConstraintMode::Independent);
        let out = fuse(&x, &p, &g, &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn balanced_alphas_match_elementwise_oracle() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let p = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let g = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let params = FusionParams::new(0.5, 0.5, ConstraintMode::Independent);
        let out = fuse(&x, &p, &g, &params).unwrap();
        for i in 0..x.numel() {
            let want = x.data()[i] + 0.5 * p.data()[i] + 0.5 * g.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_sum_mode_keeps_alphas_complementary() {
        let mut params = FusionParams::new(0.5, 0.5, ConstraintMode::FixedSum);
        for step in 0..100 {
            // emulate optimizer drift on the free parameter
            params.alpha_l.data_mut()[0] += 0.003 * ((step % 7) as f64 - 3.0);
            assert!((params.alpha_l() + params.alpha_g() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_derivatives_match_finite_differences() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let p = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let g = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let h = 1e-6;
        // d(sum fuse)/d alpha_l == sum(p_local); same for the global side
        let f = |al: f64, ag: f64| {
            fuse(
                &x,
                &p,
                &g,
                &FusionParams::new(al, ag, ConstraintMode::Independent),
            )
            .unwrap()
            .sum()
        };
        let dl = (f(0.5 + h, 0.5) - f(0.5 - h, 0.5)) / (2.0 * h);
        let dg = (f(0.5, 0.5 + h) - f(0.5, 0.5 - h)) / (2.0 * h);
        assert!((dl - p.sum()).abs() / p.sum().abs().max(1.0) < 1e-6);
        assert!((dg - g.sum()).abs() / g.sum().abs().max(1.0) < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let p = Tensor::zeros(&[1, 1, 2, 2]);
        let params = FusionParams::new(0.5, 0.5, ConstraintMode::Independent);
        assert!(fuse(&x, &p, &x, &params).is_err());
    }
}
