//! Central finite-difference checks for tape gradients.

use ndarray::ArrayD;

use super::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives a fresh tape and one [`Var`] per entry of `params`
/// (registered as differentiable leaves) and must return a scalar. Relative
/// error is `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn check_gradients<B>(params: &[ArrayD<f64>], build: B, eps: f64, abs_floor: f64) -> GradCheckReport
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(params[pi].raw_dim()));
        for k in 0..params[pi].len() {
            let orig = params[pi].as_slice().unwrap()[k];
            work[pi].as_slice_mut().unwrap()[k] = orig + eps;
            let plus = eval(&work);
            work[pi].as_slice_mut().unwrap()[k] = orig - eps;
            let minus = eval(&work);
            work[pi].as_slice_mut().unwrap()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(abs_floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
            }
            report.checked += 1;
        }
    }
    report
}
