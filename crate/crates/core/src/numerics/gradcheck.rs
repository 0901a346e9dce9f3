//! Central-difference verification of analytic gradients.

use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub param: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NumericFailure(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

fn analytic<F>(store: &ParamStore, loss_fn: &F) -> Result<ParamStore>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    Ok(work)
}

fn check_one<F>(
    store: &ParamStore,
    grads: &ParamStore,
    param: &str,
    loss_fn: &F,
    h: f64,
    tol_rel: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let analytic = grads
        .grad(param)
        .ok_or_else(|| Error::invalid(format!("unknown parameter '{param}'")))?
        .clone();
    let mut work = store.clone();
    let mut report = GradCheckReport {
        param: param.to_string(),
        checked: analytic.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        pass: true,
    };
    for (i, &a) in analytic.data().iter().enumerate() {
        let original = work.value(param).expect("checked above").data()[i];
        work.value_mut(param).expect("checked above").data_mut()[i] = original + h;
        let plus = evaluate(&work, loss_fn)?;
        work.value_mut(param).expect("checked above").data_mut()[i] = original - h;
        let minus = evaluate(&work, loss_fn)?;
        work.value_mut(param).expect("checked above").data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(a, numeric);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err < tol_rel;
    Ok(report)
}

/// Compares `∂loss/∂param` from [`Graph::backward`] with central differences
/// `(f(w+h) − f(w−h)) / 2h`, element by element.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    param: &str,
    loss_fn: F,
    h: f64,
    tol_rel: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    validate_step(h)?;
    let grads = analytic(store, &loss_fn)?;
    check_one(store, &grads, param, &loss_fn, h, tol_rel)
}

/// [`finite_diff_check`] over every entry of `store`, sharing one backward pass.
pub fn finite_diff_check_all<F>(store: &ParamStore, loss_fn: F, h: f64, tol_rel: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    validate_step(h)?;
    let grads = analytic(store, &loss_fn)?;
    store
        .names()
        .map(|name| check_one(store, &grads, name, &loss_fn, h, tol_rel))
        .collect()
}

fn validate_step(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    Ok(())
}
