//! Displacement metrics, per-step error curves, and comparison baselines.

pub mod kalman;
pub mod recursive;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TrajPoint;
use crate::error::{Error, Result};

pub use kalman::kalman_smooth;
pub use recursive::{recursive_decode, RecursiveParams, StatePerturbation};

fn check_len(pred: &[TrajPoint], gt: &[TrajPoint]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("displacement metric"));
    }
    Ok(())
}

pub fn ade(pred: &[TrajPoint], gt: &[TrajPoint]) -> Result<f64> {
    check_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum::<f64>() / gt.len() as f64)
}

pub fn fde(pred: &[TrajPoint], gt: &[TrajPoint]) -> Result<f64> {
    check_len(pred, gt)?;
    Ok(pred[pred.len() - 1].dist(gt[gt.len() - 1]))
}

/// K trajectories with their mode probabilities. Trajectories may be longer
/// than the ground truth; only the first `gt.len()` steps are scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiModal {
    pub modes: Vec<Vec<TrajPoint>>,
    pub probs: Vec<f64>,
}

impl MultiModal {
    pub fn new(modes: Vec<Vec<TrajPoint>>, probs: Vec<f64>) -> Result<Self> {
        if modes.is_empty() || modes.len() != probs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} modes with {} probabilities",
                modes.len(),
                probs.len()
            )));
        }
        Ok(Self { modes, probs })
    }

    pub fn k(&self) -> usize {
        self.modes.len()
    }

    /// Mode indices by descending probability; ties keep the lower index first.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.k()).collect();
        idx.sort_by(|a, b| self.probs[*b].total_cmp(&self.probs[*a]).then(a.cmp(b)));
        idx
    }

    fn top(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!("k = {k} with {} modes", self.k())));
        }
        let mut r = self.ranked();
        r.truncate(k);
        Ok(r)
    }

    fn mode(&self, m: usize, steps: usize) -> Result<&[TrajPoint]> {
        let t = &self.modes[m];
        if t.len() < steps {
            return Err(Error::ShapeMismatch(format!("mode {m} has {} steps, need {steps}", t.len())));
        }
        Ok(&t[..steps])
    }
}

/// Best ADE among the `k` most likely modes.
pub fn min_ade_k(pred: &MultiModal, gt: &[TrajPoint], k: usize) -> Result<f64> {
    pred.top(k)?
        .into_iter()
        .map(|m| ade(pred.mode(m, gt.len())?, gt))
        .try_fold(f64::INFINITY, |acc, v| v.map(|v| acc.min(v)))
}

pub fn min_fde_k(pred: &MultiModal, gt: &[TrajPoint], k: usize) -> Result<f64> {
    pred.top(k)?
        .into_iter()
        .map(|m| fde(pred.mode(m, gt.len())?, gt))
        .try_fold(f64::INFINITY, |acc, v| v.map(|v| acc.min(v)))
}

/// 1 when no top-k mode ends within `threshold` metres of the ground truth.
pub fn miss_k(pred: &MultiModal, gt: &[TrajPoint], k: usize, threshold: f64) -> Result<f64> {
    Ok(if min_fde_k(pred, gt, k)? > threshold { 1.0 } else { 0.0 })
}

/// Miss rate over scenes.
pub fn mr_k(preds: &[MultiModal], gts: &[Vec<TrajPoint>], k: usize, threshold: f64) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} scenes", preds.len(), gts.len())));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += miss_k(p, g, k, threshold)?;
    }
    Ok(total / preds.len() as f64)
}

/// FDE of the most likely mode.
pub fn min_fde_1(pred: &MultiModal, gt: &[TrajPoint]) -> Result<f64> {
    min_fde_k(pred, gt, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// ADE of the most likely mode.
    pub ade: f64,
    /// FDE of the most likely mode.
    pub fde: f64,
    pub min_ade: BTreeMap<String, f64>,
    pub min_fde_1: f64,
    pub mr: BTreeMap<String, f64>,
    pub mr_threshold: f64,
    pub scene_count: usize,
}

/// Aggregate metrics over scenes. Scene means are summed in input order.
pub fn evaluate(preds: &[MultiModal], gts: &[Vec<TrajPoint>], ks: &[usize], threshold: f64) -> Result<MetricsReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} scenes", preds.len(), gts.len())));
    }
    let n = preds.len() as f64;
    let (mut a, mut f) = (0.0, 0.0);
    let mut min_ade: BTreeMap<String, f64> = ks.iter().map(|k| (k.to_string(), 0.0)).collect();
    let mut mr = min_ade.clone();
    for (p, g) in preds.iter().zip(gts) {
        let best = p.top(1)?[0];
        a += ade(p.mode(best, g.len())?, g)?;
        f += fde(p.mode(best, g.len())?, g)?;
        for &k in ks {
            *min_ade.get_mut(&k.to_string()).expect("key") += min_ade_k(p, g, k)?;
            *mr.get_mut(&k.to_string()).expect("key") += miss_k(p, g, k, threshold)?;
        }
    }
    min_ade.values_mut().for_each(|v| *v /= n);
    mr.values_mut().for_each(|v| *v /= n);
    Ok(MetricsReport {
        ade: a / n,
        fde: f / n,
        min_ade,
        min_fde_1: f / n,
        mr,
        mr_threshold: threshold,
        scene_count: preds.len(),
    })
}

/// Mean pointwise error per step, averaged jointly over all (scene, mode)
/// pairs among the `k` most likely modes.
pub fn step_error_curve(preds: &[MultiModal], gts: &[Vec<TrajPoint>], k: usize) -> Result<Vec<f64>> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} scenes", preds.len(), gts.len())));
    }
    let t_f = gts[0].len();
    let mut sums = vec![0.0; t_f];
    let mut count = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if g.len() != t_f {
            return Err(Error::ShapeMismatch("ground truths of different lengths".into()));
        }
        for m in p.top(k)? {
            let traj = p.mode(m, t_f)?;
            for (s, (a, b)) in sums.iter_mut().zip(traj.iter().zip(g)) {
                *s += a.dist(*b);
            }
            count += 1;
        }
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Top-5 and top-10 curves for one head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepErrorCurve {
    pub head: String,
    pub k_top5: usize,
    pub k_top10: usize,
    pub err_top5: Vec<f64>,
    pub err_top10: Vec<f64>,
}

impl StepErrorCurve {
    /// `k` values above the mode count are clamped to it.
    pub fn compute(head: &str, preds: &[MultiModal], gts: &[Vec<TrajPoint>]) -> Result<Self> {
        let k_max = preds.first().map_or(1, |p| p.k());
        let (k5, k10) = (5.min(k_max), 10.min(k_max));
        Ok(Self {
            head: head.to_string(),
            k_top5: k5,
            k_top10: k10,
            err_top5: step_error_curve(preds, gts, k5)?,
            err_top10: step_error_curve(preds, gts, k10)?,
        })
    }

    /// Ratio of the last to the first step error of the top-5 curve.
    pub fn growth_ratio(&self) -> f64 {
        self.err_top5[self.err_top5.len() - 1] / self.err_top5[0]
    }
}

/// CSV with one block per head: a comment line, then `step,err_top5,err_top10`.
pub fn curves_csv(curves: &[StepErrorCurve]) -> String {
    let mut s = String::new();
    for c in curves {
        let _ = writeln!(
            s,
            "# head={} mean over (scene, mode) pairs of the top {} / top {} modes",
            c.head, c.k_top5, c.k_top10
        );
        s.push_str("step,err_top5,err_top10\n");
        for (i, (a, b)) in c.err_top5.iter().zip(&c.err_top10).enumerate() {
            let _ = writeln!(s, "{},{a},{b}", i + 1);
        }
    }
    s
}

/// Continue the last observed velocity for `t_f` steps.
pub fn cv_extrapolate(past: &[TrajPoint], t_f: usize) -> Result<Vec<TrajPoint>> {
    if past.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "constant velocity needs 2 observations, got {}",
            past.len()
        )));
    }
    let last = past[past.len() - 1];
    let v = last - past[past.len() - 2];
    Ok((1..=t_f).map(|i| last + v * i as f64).collect())
}
