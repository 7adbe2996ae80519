//! SGD with momentum over named parameters, and the cosine annealing
//! learning-rate schedule.

use std::collections::BTreeMap;

use super::tape::Gradients;
use crate::tensor::Tensor;
use crate::{LgspError, Result};

/// Cosine annealing from the base rate down to zero over `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

/// lr(step) = base * (1 + cos(pi * step / total)) / 2.
pub fn cosine_lr(step: usize, schedule: CosineSchedule) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(LgspError::InvalidArgument(format!(
            "step {step} beyond schedule total {}",
            schedule.total_steps
        )));
    }
    if schedule.total_steps == 0 {
        return Ok(schedule.base_lr);
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Momentum SGD keyed by parameter name. Parameters whose learning rate
/// resolves to zero are skipped entirely (no velocity update either), so
/// frozen groups stay bit-identical.
pub struct SgdMomentum {
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update: v = momentum*v + g; p -= lr * v.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &Gradients,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, p) in params {
            let lr = lr_of(&name);
            if lr == 0.0 {
                continue;
            }
            let Some(g) = grads.by_name(&name) else {
                continue;
            };
            if g.shape() != p.shape() {
                return Err(LgspError::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let vd = v.data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                vd[i] = self.momentum * vd[i] + g.data()[i];
                pd[i] -= lr * vd[i];
            }
        }
        Ok(())
    }

    /// Clears accumulated velocity (used between sessions).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
