use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamId, ParamSet, Tape, Var};
use crate::error::Result;
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    math::abs(analytic - numeric) / math::abs(analytic).max(math::abs(numeric)).max(floor)
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `h` for every parameter entry.
pub fn gradcheck<F>(params: &ParamSet, h: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut work = params.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let analytic: Vec<Vec<f64>> = work.iter().map(|p| p.grad.clone()).collect();

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, ps)?;
        Ok(t.value(l).data[0])
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for (k, &a) in grads.iter().enumerate() {
            let orig = work.get(id).value.data[k];
            work.get_mut(id).value.data[k] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).value.data[k] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).value.data[k] = orig;
            let err = relative_error(a, (up - down) / (2.0 * h), 1e-6);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst.clone_from(&work.get(id).name);
            }
        }
    }
    Ok(report)
}
