//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Backend, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.value(&root);
    if value.shape() != (1, 1) {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let v = value.get(0, 0);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check evaluation"));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params`, in parameter order.
pub fn analytic_gradients<F>(f: &F, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.value(&root).get(0, 0);
    Ok((value, tape.backward(root)?.into_vec()))
}

/// Compares `analytic` against central differences of `f` with the given step.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn compare_with_finite_differences<F>(
    f: &F,
    params: &[Matrix],
    analytic: &[Matrix],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = evaluate(f, &work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = evaluate(f, &work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Checks the tape gradient of the scalar function `f` against central differences.
pub fn grad_check<F>(f: F, params: &[Matrix], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, grads) = analytic_gradients(&f, params)?;
    compare_with_finite_differences(&f, params, &grads, step)
}
