//! Central finite-difference verification of analytic gradients.

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |g_a − g_fd| / max(1, |g_a|, |g_fd|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compares the analytic gradient of `f` against central differences for
/// every scalar in `store`.
///
/// `f` evaluates the loss at the current parameter values; when handed a
/// gradient buffer it must also accumulate the analytic gradient into it.
pub fn grad_check<F>(mut f: F, store: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, Option<&mut Grads>) -> Result<f64>,
{
    let mut grads = Grads::zeros_like(store);
    let base = f(store, Some(&mut grads))?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at unperturbed parameters".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (id, name, len) in ids {
        for i in 0..len {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = f(store, None);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = f(store, None);
            store.value_mut(id).data_mut()[i] = orig;
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            report.entries += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
