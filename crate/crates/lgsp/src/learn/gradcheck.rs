//! Central finite-difference verification of tape gradients.

use crate::tensor::Tensor;
use crate::Result;

/// Step size used by the checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome for a single parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Collected outcomes, exportable as CSV.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,checked,max_rel_err,tolerance,pass\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.name, e.checked, e.max_rel_err, e.tolerance, e.pass
            ));
        }
        out
    }
}

/// Relative error with a small floor so near-zero gradient pairs compare on
/// absolute difference instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Verifies the analytic gradient of one parameter against central finite
/// differences of `eval`, which must recompute the loss from the parameter's
/// current contents. At most `max_entries` entries are probed, spread evenly.
pub fn check_param(
    name: &str,
    param: &mut Tensor,
    analytic: &Tensor,
    eval: &mut dyn FnMut(&Tensor) -> Result<f64>,
    h: f64,
    tolerance: f64,
    max_entries: usize,
) -> Result<GradCheckEntry> {
    let n = param.numel();
    let stride = (n / max_entries.max(1)).max(1);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for i in (0..n).step_by(stride) {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let plus = eval(param)?;
        param.data_mut()[i] = orig - h;
        let minus = eval(param)?;
        param.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        max_rel = max_rel.max(relative_error(analytic.data()[i], numeric));
        checked += 1;
    }
    Ok(GradCheckEntry {
        name: name.to_string(),
        checked,
        max_rel_err: max_rel,
        tolerance,
        pass: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::tape::Tape;
    use crate::tensor::Rng;

    #[test]
    fn linear_layer_passes_at_tight_tolerance() {
        let mut rng = Rng::new(11);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let mut w = Tensor::randn(&[3, 2], &mut rng);
        let build = |w: &Tensor| -> Result<(Tape, crate::learn::tape::Var)> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param("w", w);
            let y = tape.linear_last(xv, wv, None)?;
            let sq = tape.square(y);
            let loss = tape.sum_all(sq);
            Ok((tape, loss))
        };
        let (mut tape, loss) = build(&w).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.by_name("w").unwrap().clone();
        let mut eval = |w: &Tensor| -> Result<f64> {
            let (t, l) = build(w)?;
            Ok(t.value(l).data()[0])
        };
        let entry =
            check_param("w", &mut w, &analytic, &mut eval, DEFAULT_STEP, 1e-6, 100).unwrap();
        assert!(entry.pass, "max rel err {}", entry.max_rel_err);
    }

    #[test]
    fn report_csv_shape() {
        let report = GradCheckReport {
            entries: vec![GradCheckEntry {
                name: "x".into(),
                checked: 5,
                max_rel_err: 1e-9,
                tolerance: 1e-6,
                pass: true,
            }],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("param,"));
        assert!(csv.contains("x,5,"));
        assert!(report.all_pass());
    }
}
