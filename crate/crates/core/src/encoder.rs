//! Multimodal agent encoder: past trajectory plus pooled neighbors to K
//! per-mode feature vectors, mode logits, and a one-shot trajectory decoder.

use rand::Rng;

use crate::data::{flatten, Scene, TrajPoint};
use crate::diffcore::{mlp_apply, Activation, Dense, Graph, Mlp, Node, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub past: Mlp,
    pub neighbor: Dense,
    /// `[K, D_A]`, one query row per mode.
    pub queries: ParamId,
    pub mode_mlp: Mlp,
    pub mode_head: Dense,
    /// Simultaneous decoder: all `1 + 2N` points at once.
    pub simultaneous: Mlp,
}

impl EncoderParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (h, da) = (cfg.hidden, cfg.d_agent);
        let relu = Activation::Relu;
        let id = Activation::Identity;
        let past = Mlp::init(store, rng, "enc.past", &[2 * cfg.t_p, h, da], relu, id)?;
        let neighbor = Dense::init(store, rng, "enc.nbr", 2 * cfg.t_p, da, relu)?;
        let queries = store.glorot("enc.queries", cfg.k_modes, da, rng)?;
        let mode_mlp = Mlp::init(store, rng, "enc.mode", &[da, h, da], relu, id)?;
        let mode_head = Dense::init(store, rng, "enc.logits", da, cfg.k_modes, id)?;
        let simultaneous = Mlp::init(store, rng, "sim", &[da, h, 2 * cfg.traj_len()], relu, id)?;
        Ok(Self {
            past,
            neighbor,
            queries,
            mode_mlp,
            mode_head,
            simultaneous,
        })
    }
}

/// Plain-value agent features.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentFeatures {
    pub per_mode: Vec<Vec<f64>>,
    pub mode_logits: Vec<f64>,
}

/// Agent features recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncodedNodes {
    pub per_mode: Vec<Node>,
    pub mode_logits: Node,
}

impl EncodedNodes {
    pub fn values(&self, g: &Graph<'_>) -> AgentFeatures {
        AgentFeatures {
            per_mode: self.per_mode.iter().map(|n| g.value(*n).to_vec()).collect(),
            mode_logits: g.value(self.mode_logits).to_vec(),
        }
    }
}

fn relative(points: &[TrajPoint], anchor: TrajPoint) -> Vec<f64> {
    let shifted: Vec<TrajPoint> = points.iter().map(|p| *p - anchor).collect();
    flatten(&shifted)
}

/// Encode a scene on the tape. Coordinates are taken relative to the last
/// observed point, so translated copies of a scene encode identically.
pub fn encode_graph(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    params: &EncoderParams,
    scene: &Scene,
) -> Result<EncodedNodes> {
    if scene.past.len() != cfg.t_p {
        return Err(Error::DimensionMismatch {
            layer: "enc.past".into(),
            expected: cfg.t_p,
            got: scene.past.len(),
        });
    }
    let anchor = scene.anchor();
    let x = g.input(relative(&scene.past, anchor));
    let mut latent = mlp_apply(g, &params.past, x)?;

    if cfg.use_neighbors && !scene.neighbors.is_empty() {
        let mut pooled = Vec::with_capacity(scene.neighbors.len());
        for nb in &scene.neighbors {
            if nb.len() != cfg.t_p {
                return Err(Error::DimensionMismatch {
                    layer: "enc.nbr".into(),
                    expected: cfg.t_p,
                    got: nb.len(),
                });
            }
            let xn = g.input(relative(nb, anchor));
            pooled.push(params.neighbor.apply(g, xn)?);
        }
        let total = g.sum_of(&pooled)?;
        let mean = g.scale(total, 1.0 / pooled.len() as f64);
        latent = g.add(latent, mean);
    }

    let mut per_mode = Vec::with_capacity(cfg.k_modes);
    for k in 0..cfg.k_modes {
        let q = g.param_row(params.queries, k);
        let z = g.add(latent, q);
        per_mode.push(mlp_apply(g, &params.mode_mlp, z)?);
    }
    let mode_logits = params.mode_head.apply(g, latent)?;
    Ok(EncodedNodes {
        per_mode,
        mode_logits,
    })
}

/// Encode a scene to plain values.
pub fn encode(
    store: &ParamStore,
    cfg: &ModelConfig,
    params: &EncoderParams,
    scene: &Scene,
) -> Result<AgentFeatures> {
    let mut g = Graph::new(store);
    let enc = encode_graph(&mut g, cfg, params, scene)?;
    Ok(enc.values(&g))
}

/// Simultaneous decoder: one MLP emits every coordinate, relative to the
/// last observed point.
pub fn baseline_decode(g: &mut Graph<'_>, params: &EncoderParams, a: Node) -> Result<Node> {
    mlp_apply(g, &params.simultaneous, a)
}

/// Mean Euclidean distance over the first `steps` points of two flat
/// coordinate vectors.
pub fn ade_flat(pred: &[f64], target: &[f64], steps: usize) -> f64 {
    let total: f64 = (0..steps)
        .map(|t| {
            let dx = pred[2 * t] - target[2 * t];
            let dy = pred[2 * t + 1] - target[2 * t + 1];
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    total / steps as f64
}

/// Index of the smallest ADE; ties go to the lowest index.
pub fn wta_winner(candidates: &[&[f64]], target: &[f64], steps: usize) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("winner selection"));
    }
    let mut best = (0, f64::INFINITY);
    for (k, c) in candidates.iter().enumerate() {
        if c.len() < 2 * steps || target.len() < 2 * steps {
            return Err(Error::ShapeMismatch(format!(
                "ADE over {steps} steps needs {} values, got {} and {}",
                2 * steps,
                c.len(),
                target.len()
            )));
        }
        let ade = ade_flat(c, target, steps);
        if !ade.is_finite() {
            return Err(Error::NonFinite(format!("ADE of mode {k}")));
        }
        if ade < best.1 {
            best = (k, ade);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug)]
pub struct InherentLoss {
    pub loss: Node,
    pub regression: Node,
    pub classification: Node,
    pub winner: usize,
}

/// Winner-takes-all loss. `per_mode[k]` holds one or more flat trajectories
/// for mode k; the first picks the winner by ADE over `t_f` steps, and the
/// regression term is the mean mse over all of the winner's trajectories.
/// `target` may be shorter than the trajectories (capped ground truth), in
/// which case only the covered prefix is compared.
pub fn inherent_loss_multi(
    g: &mut Graph<'_>,
    per_mode: &[Vec<Node>],
    mode_logits: Node,
    target: &[f64],
    t_f: usize,
) -> Result<InherentLoss> {
    if per_mode.iter().any(|m| m.is_empty()) {
        return Err(Error::EmptyInput("inherent loss"));
    }
    let firsts: Vec<&[f64]> = per_mode.iter().map(|m| g.value(m[0])).collect();
    let winner = wta_winner(&firsts, target, t_f)?;
    let t = g.input(target.to_vec());
    let mut terms = Vec::with_capacity(per_mode[winner].len());
    for &traj in &per_mode[winner] {
        let len = g.value(traj).len();
        let pred = match len.cmp(&target.len()) {
            std::cmp::Ordering::Equal => traj,
            std::cmp::Ordering::Greater => g.slice(traj, 0, target.len()),
            std::cmp::Ordering::Less => {
                return Err(Error::ShapeMismatch(format!(
                    "trajectory of {len} values against target of {}",
                    target.len()
                )))
            }
        };
        terms.push(g.mse(pred, t)?);
    }
    let total = g.sum_of(&terms)?;
    let regression = g.scale(total, 1.0 / terms.len() as f64);
    let classification = g.cross_entropy(mode_logits, winner)?;
    let loss = g.add(regression, classification);
    Ok(InherentLoss {
        loss,
        regression,
        classification,
        winner,
    })
}

/// `mse(traj_{k*}, F) + CE(mode_logits, k*)` with one trajectory per mode.
pub fn inherent_loss(
    g: &mut Graph<'_>,
    trajectories: &[Node],
    mode_logits: Node,
    target: &[f64],
    t_f: usize,
) -> Result<InherentLoss> {
    let per_mode: Vec<Vec<Node>> = trajectories.iter().map(|t| vec![*t]).collect();
    inherent_loss_multi(g, &per_mode, mode_logits, target, t_f)
}
