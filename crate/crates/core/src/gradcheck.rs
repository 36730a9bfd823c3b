//! Central-difference gradient oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{KinoError, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve them relative to rounding in the loss.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    out.item()
}

/// Compares tape gradients of the scalar `f` against extrapolated central differences for
/// every coordinate of every parameter in `store`.
pub fn finite_diff_check<F>(store: &ParamStore<f64>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let base = eval(&f, store)?;
    let again = eval(&f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(KinoError::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let analytic = tape.gradients(loss)?;
    drop(tape);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::with_capacity(store.len()),
        coordinates: 0,
    };
    for id in store.ids() {
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        let mut worst_here = 0.0f64;
        for (i, &g) in grad.iter().enumerate() {
            let orig = store.value(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work.value_mut(id).make_mut()[i] = orig + h;
                let plus = eval(&f, &work)?;
                work.value_mut(id).make_mut()[i] = orig - h;
                let minus = eval(&f, &work)?;
                work.value_mut(id).make_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let coarse = central(step)?;
            let fine = central(step / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let err = relative_error(g, numeric);
            report.coordinates += 1;
            if err > worst_here {
                worst_here = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
        report.per_param.push((store.name(id).to_string(), worst_here));
    }
    Ok(report)
}
