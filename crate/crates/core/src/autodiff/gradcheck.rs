//! Finite-difference checking of tape gradients with the fourth-order
//! central stencil.
//!
//! The numeric side only evaluates the forward pass, so it is independent of
//! every backward rule it checks.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::AutodiffError;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Lower bound of the relative-error denominator; keeps entries whose
    /// true gradient is zero from dividing rounding noise by zero.
    pub floor: f64,
    /// Checks at most this many entries per parameter, evenly strided.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares analytic gradients of the scalar built by `loss` against central
/// differences for every parameter in `store`.
pub fn check_params<L, E>(
    store: &mut ParamStore<f64>,
    loss: L,
    opts: &GradCheckOptions,
) -> Result<Vec<GroupReport>, E>
where
    L: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>, E>,
    E: From<AutodiffError>,
{
    store.zero_grads();
    {
        let tape = Tape::new();
        let root = loss(&tape, store)?;
        tape.backward(root)?;
        tape.accumulate_into(store);
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let tape = Tape::new();
        Ok(loss(&tape, s)?.item())
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let (n, analytic) = {
            let p = store.get(&name).unwrap();
            (p.value.numel(), p.grad.clone())
        };
        let stride = n.div_ceil(opts.max_entries.max(1)).max(1);
        let mut report = GroupReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.value(&name).unwrap().data()[i];
            let mut at = |offset: f64| -> Result<f64, E> {
                store.value_mut(&name).unwrap().data_mut()[i] = orig + offset;
                eval(store)
            };
            let h = opts.step;
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            store.value_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.data()[i];
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(a, numeric, opts.floor));
        }
        reports.push(report);
    }
    store.zero_grads();
    Ok(reports)
}
