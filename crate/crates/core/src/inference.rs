//! Forecasts from a trained model with any of its decoding heads.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{unflatten, Scene, TrajPoint};
use crate::diffcore::{softmax, Graph};
use crate::encoder::{baseline_decode, encode_graph};
use crate::error::Result;
use crate::evalkit::{cv_extrapolate, kalman_smooth, recursive_decode, MultiModal};
use crate::g2l::{generate_all, predict_keys, FillCache};
use crate::model::{HeadKind, Model};
use crate::selector::{argmax_first, confidence_scores, select_and_generate, tail_step};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeForecast {
    pub mode: usize,
    pub probability: f64,
    /// Selected granularity (key-step head only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
    /// World-frame points for steps `1..=1 + 2N`.
    pub trajectory: Vec<TrajPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Forecast {
    pub scene_id: String,
    pub head: HeadKind,
    pub modes: Vec<ModeForecast>,
}

impl Forecast {
    /// Modes truncated to the first `t_f` steps.
    pub fn multimodal(&self, t_f: usize) -> Result<MultiModal> {
        MultiModal::new(
            self.modes
                .iter()
                .map(|m| m.trajectory.iter().take(t_f).copied().collect())
                .collect(),
            self.modes.iter().map(|m| m.probability).collect(),
        )
    }
}

/// Decode every mode of `scene` with `head`. For the key-step head, `prune`
/// generates only the most confident granularity; otherwise all
/// granularities are generated and the most confident one is returned.
pub fn forecast(model: &Model, scene: &Scene, head: HeadKind, prune: bool) -> Result<Forecast> {
    let cfg = &model.config;
    let mut g = Graph::new(&model.params);
    let enc = encode_graph(&mut g, cfg, &model.encoder, scene)?;
    let probs = softmax(g.value(enc.mode_logits))?;
    let anchor = scene.anchor();
    let to_world = |pts: Vec<TrajPoint>| -> Vec<TrajPoint> { pts.into_iter().map(|p| p + anchor).collect() };

    let mut modes = Vec::with_capacity(cfg.k_modes);
    for (k, &a) in enc.per_mode.iter().enumerate() {
        let (traj, granularity, confidences) = match head {
            HeadKind::G2l => {
                let keys = predict_keys(&mut g, &model.g2l.key_head, a)?;
                let mut cache = FillCache::new(a);
                if prune {
                    let s = select_and_generate(&mut g, cfg, &model.groups, &model.g2l, &model.selector, &keys, &mut cache)?;
                    (s.trajectory.values(&g), Some(s.granularity), Some(s.confidences))
                } else {
                    let all = generate_all(&mut g, cfg, &model.groups, &model.g2l, &keys, &mut cache)?;
                    let head_key = keys.at_step(1)?;
                    let tail_key = keys.at_step(tail_step(cfg))?;
                    let c = confidence_scores(&mut g, head_key, tail_key, a, &model.selector)?;
                    let c = g.value(c).to_vec();
                    let m = argmax_first(&c);
                    (all[m].values(&g), Some(model.groups[m].granularity), Some(c))
                }
            }
            HeadKind::Simultaneous => {
                let y = baseline_decode(&mut g, &model.encoder, a)?;
                (unflatten(g.value(y)), None, None)
            }
            HeadKind::Recursive => {
                let y = recursive_decode(&mut g, &model.recursive, a, cfg.traj_len(), None)?;
                (unflatten(g.value(y)), None, None)
            }
        };
        modes.push(ModeForecast {
            mode: k,
            probability: probs[k],
            granularity,
            confidences,
            trajectory: to_world(traj),
        });
    }
    Ok(Forecast {
        scene_id: scene.id.clone(),
        head,
        modes,
    })
}

/// [`forecast`] over many scenes, in parallel, results in input order.
pub fn forecast_all(model: &Model, scenes: &[Scene], head: HeadKind, prune: bool) -> Result<Vec<Forecast>> {
    scenes
        .par_iter()
        .map(|s| forecast(model, s, head, prune))
        .collect()
}

/// Anything that can produce multimodal forecasts for evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Predictor {
    Head(HeadKind),
    /// Constant-velocity extrapolation; a single mode.
    ConstantVelocity,
    /// Simultaneous-head modes passed through a constant-velocity smoother.
    KalmanSimultaneous { q: f64, r: f64 },
}

impl Predictor {
    /// `g2l`, `simultaneous`, `recursive`, `cv` or `kalman`.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "cv" => Predictor::ConstantVelocity,
            "kalman" => Predictor::KalmanSimultaneous {
                q: KALMAN_Q,
                r: KALMAN_R,
            },
            other => Predictor::Head(HeadKind::parse(other)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Head(h) => h.name(),
            Predictor::ConstantVelocity => "cv",
            Predictor::KalmanSimultaneous { .. } => "kalman",
        }
    }

    /// The decoding head whose parameters this predictor relies on.
    pub fn head(&self) -> Option<HeadKind> {
        match self {
            Predictor::Head(h) => Some(*h),
            Predictor::ConstantVelocity => None,
            Predictor::KalmanSimultaneous { .. } => Some(HeadKind::Simultaneous),
        }
    }
}

/// Smoother process-noise intensity, m²/s³ per unit step.
pub const KALMAN_Q: f64 = 0.01;
/// Smoother measurement variance, m² (0.05 m position noise).
pub const KALMAN_R: f64 = 0.0025;

/// Forecasts of `predictor` for every scene, truncated to `t_f` steps.
pub fn predict_multimodal(model: &Model, scenes: &[Scene], predictor: Predictor) -> Result<Vec<MultiModal>> {
    let t_f = model.config.t_f;
    match predictor {
        Predictor::Head(head) => forecast_all(model, scenes, head, true)?
            .iter()
            .map(|f| f.multimodal(t_f))
            .collect(),
        Predictor::ConstantVelocity => scenes
            .par_iter()
            .map(|s| MultiModal::new(vec![cv_extrapolate(&s.past, t_f)?], vec![1.0]))
            .collect(),
        Predictor::KalmanSimultaneous { q, r } => forecast_all(model, scenes, HeadKind::Simultaneous, true)?
            .par_iter()
            .map(|f| {
                let m = f.multimodal(t_f)?;
                let modes = m
                    .modes
                    .iter()
                    .map(|t| kalman_smooth(t, q, r))
                    .collect::<Result<Vec<_>>>()?;
                MultiModal::new(modes, m.probs.clone())
            })
            .collect(),
    }
}
