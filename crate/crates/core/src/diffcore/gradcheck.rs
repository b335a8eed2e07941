//! Central finite-difference validation of tape gradients.

use crate::diffcore::graph::{Graph, Node};
use crate::diffcore::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Smallest |pre-activation| at any ReLU during the base evaluation.
    pub relu_margin: f64,
    pub entries_checked: usize,
}

fn eval<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Node>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during finite-difference probe".into()));
    }
    Ok(v)
}

/// Compare tape gradients of `f` against central differences at `±eps`
/// for every entry of every parameter.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Node>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    finite_diff_check_params(f, params, eps, &ids)
}

/// [`finite_diff_check`] restricted to `ids`.
pub fn finite_diff_check_params<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    ids: &[ParamId],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Node>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let (analytic, relu_margin) = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite("loss at base point".into()));
        }
        (g.backward(loss)?, g.relu_margin())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        relu_margin,
        entries_checked: 0,
    };
    for &id in ids {
        let a = analytic.dense(params, id);
        for i in 0..a.len() {
            let orig = probe.get(id).values[i];
            probe.get_mut(id).values[i] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe.get_mut(id).values[i] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe.get_mut(id).values[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (a[i] - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
