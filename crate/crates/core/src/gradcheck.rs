//! Central finite-difference gradient checking.
//!
//! Only forward evaluations enter the numerical estimate, so the check is
//! independent of every backward rule it validates.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for the relative error, so exactly-zero gradients do
/// not turn rounding noise into a failure.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against central differences of `f` for every entry
/// of every input. `f` must return a single-element tensor and be a pure
/// function of its inputs.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec());
        for j in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[j];
            work[idx].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = (idx, j, a, numeric);
            }
        }
    }
    Ok(report)
}
