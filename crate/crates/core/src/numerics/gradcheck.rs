//! Central finite differences against the recorded gradients.

use super::{ParamId, ParamSet, Tape, Var};

/// Denominator floor for the relative error, so gradients that are zero up
/// to roundoff do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` for one element.
pub fn finite_difference<F>(params: &ParamSet, id: ParamId, index: usize, step: f64, loss: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Var<'t>,
{
    let eval = |delta: f64| {
        let mut p = params.clone();
        p.by_id_mut(id).data_mut()[index] += delta;
        let tape = Tape::new();
        loss(&tape, &p).value().item()
    };
    (eval(step) - eval(-step)) / (2.0 * step)
}

/// Compares analytic and finite-difference gradients over every element of
/// every parameter (or at most `max_per_param` evenly spaced elements).
pub fn check_gradients<F>(params: &ParamSet, step: f64, max_per_param: Option<usize>, loss: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Var<'t>,
{
    let tape = Tape::new();
    let out = loss(&tape, params);
    let grads = tape.backward(out).expect("scalar loss");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (id, name, value) in params.iter() {
        let n = value.numel();
        let stride = max_per_param.map_or(1, |k| n.div_ceil(k.max(1)));
        for index in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
            let numeric = finite_difference(params, id, index, step, &loss);
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.to_string();
                report.worst_index = index;
            }
        }
    }
    report
}
