//! Central finite-difference checks for [`Graph`] gradients.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Entries whose analytic and numeric derivatives are both below this are
/// compared absolutely instead of relatively.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<String>,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        diff / scale
    }
}

fn finish(report: GradReport, tol: f64) -> Result<GradReport, String> {
    if report.max_rel_error < tol {
        Ok(report)
    } else {
        Err(format!(
            "relative error {:.3e} >= {tol:.1e} at {}",
            report.max_rel_error,
            report.worst.as_deref().unwrap_or("?")
        ))
    }
}

/// Checks `d f / d inputs` where `f` builds a scalar from free inputs.
pub fn check_inputs<F>(inputs: &[Tensor], tol: f64, f: F) -> Result<GradReport, String>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar_value(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + STEP;
            let plus = eval(&work);
            work[k].data_mut()[e] = orig - STEP;
            let minus = eval(&work);
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = rel_error(analytic.data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(format!("input {k}[{e}]: analytic {} numeric {numeric}", analytic.data()[e]));
            }
        }
    }
    finish(report, tol)
}

/// Checks `d f / d params` for the listed parameters of `store`.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], tol: f64, f: F) -> Result<GradReport, String>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let analytic: std::collections::HashMap<ParamId, Tensor> = g.param_grads(&grads).into_iter().collect();

    let mut report = GradReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work = store.clone();
    for &id in ids {
        let shape = store.value(id).shape();
        let a = analytic.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + STEP;
            let plus = {
                let mut g = Graph::new();
                let o = f(&mut g, &work);
                g.scalar_value(o)
            };
            work.value_mut(id).data_mut()[e] = orig - STEP;
            let minus = {
                let mut g = Graph::new();
                let o = f(&mut g, &work);
                g.scalar_value(o)
            };
            work.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = rel_error(a.data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(format!("{}[{e}]: analytic {} numeric {numeric}", store.name(id), a.data()[e]));
            }
        }
    }
    finish(report, tol)
}
