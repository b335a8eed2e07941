//! Global-to-local decoding: fine key steps, downsampled key groups, and
//! midpoint filling from coarse intervals down to single steps.

mod embed;
mod fill;
mod groups;

pub use embed::{position_embedding, sinusoidal, PositionEmbeddingTable};
pub use fill::{
    fill_midpoint, generate_trajectory, generate_trajectory_cached, FillCache, FillHead,
    FillHeadParams, GranularityTrajectory, LevelOrder, StepSource,
};
pub use groups::{build_key_groups, fine_key_count, KeyStepGroup};

use rand::Rng;

use crate::data::TrajPoint;
use crate::diffcore::{mlp_apply, regression_loss, Activation, Graph, LossKind, Mlp, Node, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct G2lParams {
    /// `D_A -> hidden -> 2(N + 1)`, the fine key coordinates.
    pub key_head: Mlp,
    pub embedding: PositionEmbeddingTable,
    /// One set when heads are shared; otherwise one per granularity, in chain order.
    pub fill: Vec<FillHeadParams>,
    /// Log-variances of the key displacements, present for the Gaussian NLL loss.
    pub spatial_logvar: Option<ParamId>,
}

impl G2lParams {
    pub fn init<R: Rng>(
        cfg: &ModelConfig,
        groups: &[KeyStepGroup],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let n = cfg.n_fine();
        let key_head = Mlp::init(
            store,
            rng,
            "g2l.keys",
            &[cfg.d_agent, cfg.hidden, 2 * (n + 1)],
            Activation::Relu,
            Activation::Identity,
        )?;
        let embedding = PositionEmbeddingTable::init(store, cfg.embedding, cfg.traj_len() + 1, cfg.d_embed)?;
        let l_max = groups.last().map_or(2, |g| g.granularity);
        let fill = if cfg.share_fill_heads {
            vec![FillHeadParams::init(store, rng, "g2l.fill", l_max, cfg.d_embed, cfg.d_agent, cfg.hidden)?]
        } else {
            groups
                .iter()
                .map(|grp| {
                    let prefix = format!("g2l.fill.g{}", grp.granularity);
                    FillHeadParams::init(store, rng, &prefix, grp.granularity, cfg.d_embed, cfg.d_agent, cfg.hidden)
                })
                .collect::<Result<_>>()?
        };
        let spatial_logvar = match cfg.loss_kind {
            LossKind::NllGaussian => Some(store.zeros("g2l.logvar", vec![2])?),
            _ => None,
        };
        Ok(Self {
            key_head,
            embedding,
            fill,
            spatial_logvar,
        })
    }

    /// Fill heads used by the group at position `m` in the chain.
    pub fn heads_for(&self, m: usize) -> &FillHeadParams {
        if self.fill.len() == 1 {
            &self.fill[0]
        } else {
            &self.fill[m]
        }
    }
}

/// Fine key coordinates for one mode.
#[derive(Clone, Debug)]
pub struct KeyPrediction {
    /// Flat `2(N + 1)` vector.
    pub flat: Node,
    /// One 2-vector per fine key, step `1 + 2p` at position `p`.
    pub keys: Vec<Node>,
}

impl KeyPrediction {
    pub fn values(&self, g: &Graph<'_>) -> Vec<TrajPoint> {
        self.keys
            .iter()
            .map(|k| {
                let v = g.value(*k);
                TrajPoint::new(v[0], v[1])
            })
            .collect()
    }

    /// Keys of a group, taken from the fine prediction.
    pub fn for_group(&self, group: &KeyStepGroup) -> Vec<Node> {
        group.fine_positions().map(|p| self.keys[p]).collect()
    }

    /// Key at a 1-based step index, which must be odd.
    pub fn at_step(&self, step: usize) -> Result<Node> {
        if step.is_multiple_of(2) || (step - 1) / 2 >= self.keys.len() {
            return Err(Error::InvalidArgument(format!("step {step} is not a fine key")));
        }
        Ok(self.keys[(step - 1) / 2])
    }
}

pub fn predict_keys(g: &mut Graph<'_>, key_head: &Mlp, a: Node) -> Result<KeyPrediction> {
    let flat = mlp_apply(g, key_head, a)?;
    let n = g.value(flat).len() / 2;
    let keys = (0..n).map(|p| g.slice(flat, 2 * p, 2)).collect();
    Ok(KeyPrediction { flat, keys })
}

/// How ground truth covers the key steps beyond the horizon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtTail {
    /// Extend the ground truth by one linearly extrapolated step.
    #[default]
    Extrapolate,
    /// Drop sections that end beyond the last real step.
    Cap,
}

/// Regression loss between key displacements and ground-truth displacements
/// over consecutive sections of `group`. `truth[idx - 1]` is the ground truth
/// at step `idx`. With [`GtTail::Extrapolate`] every key step must be covered;
/// with [`GtTail::Cap`] uncovered sections are skipped.
#[allow(clippy::too_many_arguments)]
pub fn spatial_loss(
    g: &mut Graph<'_>,
    keys: &[Node],
    truth: &[TrajPoint],
    group: &KeyStepGroup,
    kind: LossKind,
    logvar: Option<ParamId>,
    tail: GtTail,
) -> Result<Node> {
    if keys.len() != group.indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "group {} has {} keys, got {}",
            group.granularity,
            group.indices.len(),
            keys.len()
        )));
    }
    let mut diffs = Vec::new();
    let mut target = Vec::new();
    for s in 0..keys.len() - 1 {
        let (a, b) = (group.indices[s], group.indices[s + 1]);
        if b > truth.len() {
            match tail {
                GtTail::Cap => continue,
                GtTail::Extrapolate => {
                    return Err(Error::InvalidArgument(format!(
                        "ground truth has no step {b} for granularity {}",
                        group.granularity
                    )))
                }
            }
        }
        diffs.push(g.sub(keys[s + 1], keys[s]));
        let d = truth[b - 1] - truth[a - 1];
        target.extend([d.x, d.y]);
    }
    if diffs.is_empty() {
        return Err(Error::EmptyInput("spatial loss sections"));
    }
    let n_sections = diffs.len();
    let mut pred = g.concat(&diffs);
    if kind == LossKind::NllGaussian {
        let id = logvar.ok_or_else(|| Error::Config("Gaussian NLL needs a log-variance parameter".into()))?;
        let lv = g.param(id);
        let mut parts = vec![pred];
        parts.extend(std::iter::repeat_n(lv, n_sections));
        pred = g.concat(&parts);
    }
    let t = g.input(target);
    regression_loss(g, kind, pred, t)
}

/// Trajectories of one mode at every granularity, finest first.
pub fn generate_all(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    groups: &[KeyStepGroup],
    params: &G2lParams,
    keys: &KeyPrediction,
    cache: &mut FillCache,
) -> Result<Vec<GranularityTrajectory>> {
    let mut out: Vec<GranularityTrajectory> = Vec::with_capacity(groups.len());
    for (m, group) in groups.iter().enumerate() {
        let donor = group
            .inherits_tail_from
            .and_then(|l| out.iter().find(|t| t.granularity == l));
        let traj = generate_trajectory_cached(
            g,
            group,
            &keys.for_group(group),
            cache,
            params.heads_for(m),
            &params.embedding,
            cfg.traj_len(),
            donor,
            LevelOrder::Forward,
        )?;
        out.push(traj);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
