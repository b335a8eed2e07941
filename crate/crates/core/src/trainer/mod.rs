//! Loss composition, the optimization loop, and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extrapolate_gt, flatten, Scene, SceneSet, TrajPoint};
use crate::diffcore::{AdamConfig, Gradients, Graph, LossKind, Node, OptimizerKind, OptimizerState, ParamStore};
use crate::encoder::{baseline_decode, encode_graph, inherent_loss, inherent_loss_multi, wta_winner};
use crate::error::{Error, Result};
use crate::evalkit::recursive_decode;
use crate::g2l::{generate_trajectory_cached, predict_keys, spatial_loss, FillCache, GranularityTrajectory, GtTail, LevelOrder};
use crate::model::{EmbeddingMode, HeadKind, Model, ModelConfig, TailKey};
use crate::selector::{confidence_loss, confidence_scores, gt_confidence, tail_step};

/// Which modes receive the spatial and confidence losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// Only the min-ADE mode.
    #[default]
    Wta,
    /// Every mode, averaged.
    AllModes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k_modes: usize,
    pub granularities: Vec<usize>,
    pub d_embed: usize,
    pub d_agent: usize,
    pub hidden: usize,
    pub recurrent_hidden: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub spatial_mode: SpatialMode,
    pub gt_tail: GtTail,
    pub embedding: EmbeddingMode,
    pub share_fill_heads: bool,
    pub use_neighbors: bool,
    pub tail_key: TailKey,
    pub t_p: usize,
    pub t_f: usize,
    /// Head whose loss drives the encoder.
    pub head: HeadKind,
    /// Extra heads trained on detached agent features.
    pub baselines: Vec<HeadKind>,
    pub freeze_encoder: bool,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            eta1: 0.1,
            eta2: 1.0,
            lr: 7.5e-4,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 50,
            k_modes: m.k_modes,
            granularities: m.granularities,
            d_embed: m.d_embed,
            d_agent: m.d_agent,
            hidden: m.hidden,
            recurrent_hidden: m.recurrent_hidden,
            loss_kind: m.loss_kind,
            seed: 0,
            spatial_mode: SpatialMode::Wta,
            gt_tail: GtTail::Extrapolate,
            embedding: m.embedding,
            share_fill_heads: m.share_fill_heads,
            use_neighbors: m.use_neighbors,
            tail_key: m.tail_key,
            t_p: m.t_p,
            t_f: m.t_f,
            head: HeadKind::G2l,
            baselines: Vec::new(),
            freeze_encoder: false,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    /// `nuscenes` (Adam, lr 7.5e-4, batch 64, 50 epochs) or
    /// `ethucy` (AdamW, lr 1e-3, batch 128, 256 epochs).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "nuscenes" => Ok(Self::default()),
            "ethucy" => Ok(Self {
                optimizer: OptimizerKind::Adamw,
                lr: 1e-3,
                weight_decay: 0.01,
                batch_size: 128,
                epochs: 256,
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Overlay the fields present in `json` on `base`.
    pub fn from_json_over(base: &TrainConfig, json: &str) -> Result<Self> {
        let overlay: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config: {e}")))?;
        let serde_json::Value::Object(fields) = overlay else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base)?;
        let target = merged.as_object_mut().expect("struct serializes to an object");
        for (k, v) in fields {
            target.insert(k, v);
        }
        let cfg: TrainConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_p: self.t_p,
            t_f: self.t_f,
            k_modes: self.k_modes,
            d_embed: self.d_embed,
            d_agent: self.d_agent,
            hidden: self.hidden,
            recurrent_hidden: self.recurrent_hidden,
            granularities: self.granularities.clone(),
            embedding: self.embedding,
            share_fill_heads: self.share_fill_heads,
            use_neighbors: self.use_neighbors,
            tail_key: self.tail_key,
            loss_kind: self.loss_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.eta1) || !nonneg(self.eta2) {
            return Err(Error::Config("eta1 and eta2 must be finite and >= 0".into()));
        }
        if !nonneg(self.lr) || !nonneg(self.weight_decay) {
            return Err(Error::Config("lr and weight_decay must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        match self.optimizer {
            OptimizerKind::Adam => AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::adam(self.lr)
            },
            OptimizerKind::Adamw => AdamConfig::adamw(self.lr, self.weight_decay),
        }
    }

    /// Whether `head` receives gradient during training.
    pub fn trains(&self, head: HeadKind) -> bool {
        self.head == head || self.baselines.contains(&head)
    }

    /// Whether the optimizer updates the tensor called `name`.
    pub fn is_trainable(&self, name: &str) -> bool {
        if name.starts_with("enc.") {
            !self.freeze_encoder
        } else if name.starts_with("sim.") {
            self.trains(HeadKind::Simultaneous)
        } else if name.starts_with("rec.") {
            self.trains(HeadKind::Recursive)
        } else {
            self.trains(HeadKind::G2l)
        }
    }
}

/// `L_G + eta1 * sum(L_s) + eta2 * L_c`.
pub fn total_loss_value(l_g: f64, l_s_sum: f64, l_c: f64, eta1: f64, eta2: f64) -> f64 {
    l_g + eta1 * l_s_sum + eta2 * l_c
}

/// Loss terms of one scene, as values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub inherent: f64,
    pub spatial: f64,
    pub confidence: f64,
    pub auxiliary: f64,
}

/// Record the full objective of one scene on `g`.
pub fn scene_loss(g: &mut Graph<'_>, model: &Model, tc: &TrainConfig, scene: &Scene) -> Result<(Node, LossParts)> {
    let cfg = &model.config;
    if scene.future.len() != cfg.t_f {
        return Err(Error::DimensionMismatch {
            layer: "ground truth".into(),
            expected: cfg.t_f,
            got: scene.future.len(),
        });
    }
    let anchor = scene.anchor();
    let future: Vec<TrajPoint> = scene.future.iter().map(|p| *p - anchor).collect();
    let len = cfg.traj_len();
    let truth: Vec<TrajPoint> = match tc.gt_tail {
        GtTail::Extrapolate if len > future.len() => extrapolate_gt(&future, len)?,
        _ => future.clone(),
    };
    let target = flatten(&truth);

    let enc = encode_graph(g, cfg, &model.encoder, scene)?;
    let (feats, logits) = if tc.freeze_encoder {
        let f: Vec<Node> = enc.per_mode.iter().map(|n| g.detach(*n)).collect();
        (f, g.detach(enc.mode_logits))
    } else {
        (enc.per_mode.clone(), enc.mode_logits)
    };

    let mut parts = LossParts::default();
    let mut terms: Vec<Node> = Vec::new();
    match tc.head {
        HeadKind::G2l => {
            let (l_g, l_s, l_c) = g2l_terms(g, model, tc, &feats, logits, &truth, &future, &target)?;
            parts.inherent = g.scalar(l_g);
            parts.spatial = g.scalar(l_s);
            parts.confidence = g.scalar(l_c);
            terms.push(l_g);
            terms.push(g.scale(l_s, tc.eta1));
            terms.push(g.scale(l_c, tc.eta2));
        }
        head => {
            let trajs = decode_all(g, model, head, &feats)?;
            let l = inherent_loss(g, &trajs, logits, &target, cfg.t_f)?;
            parts.inherent = g.scalar(l.loss);
            terms.push(l.loss);
        }
    }

    for &head in tc.baselines.iter().filter(|h| **h != tc.head) {
        let detached: Vec<Node> = feats.iter().map(|n| g.detach(*n)).collect();
        let trajs = decode_all(g, model, head, &detached)?;
        let values: Vec<&[f64]> = trajs.iter().map(|t| g.value(*t)).collect();
        let k = wta_winner(&values, &target, cfg.t_f)?;
        let pred = g.slice(trajs[k], 0, target.len());
        let t = g.input(target.clone());
        let l = g.mse(pred, t)?;
        parts.auxiliary += g.scalar(l);
        terms.push(l);
    }

    let total = g.sum_of(&terms)?;
    parts.total = g.scalar(total);
    Ok((total, parts))
}

fn decode_all(g: &mut Graph<'_>, model: &Model, head: HeadKind, feats: &[Node]) -> Result<Vec<Node>> {
    feats
        .iter()
        .map(|&a| match head {
            HeadKind::Simultaneous => baseline_decode(g, &model.encoder, a),
            HeadKind::Recursive => recursive_decode(g, &model.recursive, a, model.config.traj_len(), None),
            HeadKind::G2l => Err(Error::InvalidArgument("key-step head is not a single decoder".into())),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn g2l_terms(
    g: &mut Graph<'_>,
    model: &Model,
    tc: &TrainConfig,
    feats: &[Node],
    logits: Node,
    truth: &[TrajPoint],
    future: &[TrajPoint],
    target: &[f64],
) -> Result<(Node, Node, Node)> {
    let cfg = &model.config;
    let groups = &model.groups;
    let k_modes = feats.len();

    let mut keys = Vec::with_capacity(k_modes);
    let mut caches = Vec::with_capacity(k_modes);
    let mut trajs: Vec<Vec<GranularityTrajectory>> = Vec::with_capacity(k_modes);
    for &a in feats {
        let kp = predict_keys(g, &model.g2l.key_head, a)?;
        let mut cache = FillCache::new(a);
        let fine = generate_trajectory_cached(
            g,
            &groups[0],
            &kp.for_group(&groups[0]),
            &mut cache,
            model.g2l.heads_for(0),
            &model.g2l.embedding,
            cfg.traj_len(),
            None,
            LevelOrder::Forward,
        )?;
        keys.push(kp);
        caches.push(cache);
        trajs.push(vec![fine]);
    }
    let fine_values: Vec<Vec<f64>> = trajs.iter().map(|t| t[0].flat_values(g)).collect();
    let refs: Vec<&[f64]> = fine_values.iter().map(|v| &v[..]).collect();
    let winner = wta_winner(&refs, target, cfg.t_f)?;

    let full: Vec<usize> = match tc.spatial_mode {
        SpatialMode::Wta => vec![winner],
        SpatialMode::AllModes => (0..k_modes).collect(),
    };
    for &k in &full {
        for (m, group) in groups.iter().enumerate().skip(1) {
            let done = &trajs[k];
            let donor = group
                .inherits_tail_from
                .and_then(|l| done.iter().find(|t| t.granularity == l));
            let t = generate_trajectory_cached(
                g,
                group,
                &keys[k].for_group(group),
                &mut caches[k],
                model.g2l.heads_for(m),
                &model.g2l.embedding,
                cfg.traj_len(),
                donor,
                LevelOrder::Forward,
            )?;
            trajs[k].push(t);
        }
    }

    let per_mode: Vec<Vec<Node>> = trajs
        .iter()
        .map(|ts| ts.iter().map(|t| t.flat(g)).collect())
        .collect();
    let l_g = inherent_loss_multi(g, &per_mode, logits, target, cfg.t_f)?;
    debug_assert_eq!(l_g.winner, winner);

    let mut spatial = Vec::new();
    let mut confidence = Vec::new();
    for &k in &full {
        for group in groups {
            spatial.push(spatial_loss(
                g,
                &keys[k].for_group(group),
                truth,
                group,
                cfg.loss_kind,
                model.g2l.spatial_logvar,
                tc.gt_tail,
            )?);
        }
        let head = keys[k].at_step(1)?;
        let tail = keys[k].at_step(tail_step(cfg))?;
        let c_hat = confidence_scores(g, head, tail, feats[k], &model.selector)?;
        let values: Vec<Vec<TrajPoint>> = trajs[k].iter().map(|t| t.values(g)).collect();
        let c = gt_confidence(&values, future, cfg.t_f)?;
        confidence.push(confidence_loss(g, c_hat, &c, cfg.loss_kind, model.selector.logvar)?);
    }
    let per = 1.0 / full.len() as f64;
    let s = g.sum_of(&spatial)?;
    let l_s = g.scale(s, per);
    let c = g.sum_of(&confidence)?;
    let l_c = g.scale(c, per);
    Ok((l_g.loss, l_s, l_c))
}

/// Mean loss and gradient over a batch. Per-scene work runs in parallel;
/// gradients are summed in batch order.
pub fn batch_gradients(model: &Model, tc: &TrainConfig, scenes: &[&Scene]) -> Result<(f64, Gradients, LossParts)> {
    let results: Vec<Result<(LossParts, Gradients)>> = scenes
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(&model.params);
            let (loss, parts) = scene_loss(&mut g, model, tc, s)?;
            Ok((parts, g.backward(loss)?))
        })
        .collect();
    let mut grads = Gradients::empty(model.params.len());
    let mut sum = LossParts::default();
    for r in results {
        let (p, gr) = r?;
        grads.accumulate(&gr);
        sum.total += p.total;
        sum.inherent += p.inherent;
        sum.spatial += p.spatial;
        sum.confidence += p.confidence;
        sum.auxiliary += p.auxiliary;
    }
    let n = scenes.len() as f64;
    grads.scale(1.0 / n);
    grads.densify(&model.params);
    let mean = LossParts {
        total: sum.total / n,
        inherent: sum.inherent / n,
        spatial: sum.spatial / n,
        confidence: sum.confidence / n,
        auxiliary: sum.auxiliary / n,
    };
    Ok((mean.total, grads, mean))
}

/// Progress callback argument.
#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Train from a fresh initialization.
pub fn train(config: &TrainConfig, data: &SceneSet) -> Result<Checkpoint> {
    let model = Model::init(config.model_config(), config.seed)?;
    train_model(config, data, model, |_| {})
}

/// Continue optimizing `model` (for example with a frozen encoder).
pub fn train_model(
    config: &TrainConfig,
    data: &SceneSet,
    mut model: Model,
    mut on_epoch: impl FnMut(EpochReport),
) -> Result<Checkpoint> {
    config.validate()?;
    if model.config != config.model_config() {
        return Err(Error::Config("model architecture differs from the training config".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    if data.t_p != config.t_p || data.t_f != config.t_f {
        return Err(Error::Config(format!(
            "data has t_p={} t_f={}, config expects t_p={} t_f={}",
            data.t_p, data.t_f, config.t_p, config.t_f
        )));
    }
    let trainable: Vec<bool> = model
        .params
        .iter()
        .map(|(_, t)| config.is_trainable(&t.name))
        .collect();
    let mut opt = OptimizerState::new(config.adam(), &model.params);
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_sum = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let scenes: Vec<&Scene> = chunk.iter().map(|&i| &data.scenes[i]).collect();
            let (loss, mut grads, _) = match batch_gradients(&model, config, &scenes) {
                Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { epoch, batch }),
                r => r?,
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            grads.clip_global_norm(config.clip_norm);
            opt.step_masked(&mut model.params, &grads, |id| trainable[id.index()])?;
            epoch_sum += loss * scenes.len() as f64;
        }
        let mean_loss = epoch_sum / data.len() as f64;
        trace.push(mean_loss);
        on_epoch(EpochReport { epoch, mean_loss });
    }
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params: model.params,
        loss_trace: trace,
    })
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model_config(), self.params.clone())
    }
}

/// Mean loss over a scene set without updating anything.
pub fn evaluate_loss(model: &Model, tc: &TrainConfig, scenes: &[Scene]) -> Result<LossParts> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    Ok(batch_gradients(model, tc, &refs)?.2)
}

#[doc(hidden)]
pub fn param_snapshot(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| t.values.clone()).collect()
}
