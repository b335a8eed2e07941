//! Finite-difference checks over every parameterized head of a small model.

use serde::Serialize;

use crate::data::{flatten, gen_synthetic, FamilyCounts, Scene, SynthConfig};
use crate::diffcore::{finite_diff_check_params, GradCheckReport, Graph, Node, ParamId};
use crate::encoder::{baseline_decode, encode_graph};
use crate::error::{Error, Result};
use crate::evalkit::recursive_decode;
use crate::g2l::{generate_all, predict_keys, spatial_loss, FillCache, GtTail};
use crate::model::{EmbeddingMode, Model};
use crate::selector::{confidence_loss, confidence_scores, tail_step};
use crate::trainer::{scene_loss, TrainConfig};

/// Draws whose smallest ReLU pre-activation is below this are resampled.
pub const RELU_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 32;

#[derive(Clone, Debug, Serialize)]
pub struct HeadCheck {
    pub head: String,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Draws skipped for sitting too close to a ReLU kink.
    pub rejected: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteReport {
    pub seed: u64,
    pub eps: f64,
    pub max_rel_error: f64,
    pub heads: Vec<HeadCheck>,
}

/// Head name and the parameter-name prefixes it owns.
pub const HEADS: [(&str, &[&str]); 6] = [
    ("encoder", &["enc."]),
    ("simultaneous", &["sim."]),
    ("keys", &["g2l.keys", "g2l.pos"]),
    ("fill", &["g2l.fill"]),
    ("confidence", &["sel."]),
    ("recursive", &["rec."]),
];

fn small_train_config() -> TrainConfig {
    TrainConfig {
        k_modes: 2,
        d_embed: 4,
        d_agent: 4,
        hidden: 6,
        recurrent_hidden: 4,
        embedding: EmbeddingMode::Learnable,
        ..TrainConfig::default()
    }
}

fn head_loss(g: &mut Graph<'_>, head: &str, model: &Model, scene: &Scene) -> Result<Node> {
    let cfg = &model.config;
    let enc = encode_graph(g, cfg, &model.encoder, scene)?;
    let anchor = scene.anchor();
    let future: Vec<_> = scene.future.iter().map(|p| *p - anchor).collect();
    let truth = crate::data::extrapolate_gt(&future, cfg.traj_len())?;
    let target = g.input(flatten(&truth));
    let mut parts = Vec::new();
    for (k, &a) in enc.per_mode.iter().enumerate() {
        match head {
            "encoder" => {
                let s = g.sum(a);
                parts.push(g.mul(s, s));
                if k == 0 {
                    parts.push(g.cross_entropy(enc.mode_logits, 1.min(cfg.k_modes - 1))?);
                }
            }
            "simultaneous" => {
                let y = baseline_decode(g, &model.encoder, a)?;
                parts.push(g.mse(y, target)?);
            }
            "recursive" => {
                let y = recursive_decode(g, &model.recursive, a, cfg.traj_len(), None)?;
                parts.push(g.mse(y, target)?);
            }
            "keys" | "fill" => {
                let keys = predict_keys(g, &model.g2l.key_head, a)?;
                let mut cache = FillCache::new(a);
                let trajs = generate_all(g, cfg, &model.groups, &model.g2l, &keys, &mut cache)?;
                for t in &trajs {
                    let f = t.flat(g);
                    parts.push(g.mse(f, target)?);
                }
                for group in &model.groups {
                    parts.push(spatial_loss(
                        g,
                        &keys.for_group(group),
                        &truth,
                        group,
                        cfg.loss_kind,
                        model.g2l.spatial_logvar,
                        GtTail::Extrapolate,
                    )?);
                }
            }
            "confidence" => {
                let keys = predict_keys(g, &model.g2l.key_head, a)?;
                let h = keys.at_step(1)?;
                let t = keys.at_step(tail_step(cfg))?;
                let c_hat = confidence_scores(g, h, t, a, &model.selector)?;
                let m = cfg.n_granularities();
                let c: Vec<f64> = (0..m).map(|i| (i + 1) as f64 / (m * (m + 1) / 2) as f64).collect();
                parts.push(confidence_loss(g, c_hat, &c, cfg.loss_kind, model.selector.logvar)?);
            }
            other => return Err(Error::InvalidArgument(format!("unknown head `{other}`"))),
        }
    }
    g.sum_of(&parts)
}

fn draw(seed: u64, tc: &TrainConfig) -> Result<(Model, Scene)> {
    let model = Model::init(tc.model_config(), seed)?;
    let synth = SynthConfig {
        counts: FamilyCounts::uniform(1),
        neighbors: 2,
        ..SynthConfig::default()
    };
    let set = gen_synthetic(&synth, seed)?;
    let scene = set.scenes[(seed % set.len() as u64) as usize].clone();
    Ok((model, scene))
}

fn check_one(
    seed: u64,
    eps: f64,
    prefixes: &[&str],
    f: impl Fn(&mut Graph<'_>, &Model, &Scene) -> Result<Node>,
) -> Result<(GradCheckReport, usize)> {
    let tc = small_train_config();
    let mut rejected = 0;
    for j in 0..MAX_DRAWS {
        let (model, scene) = draw(seed.wrapping_mul(MAX_DRAWS).wrapping_add(j), &tc)?;
        let ids: Vec<ParamId> = model
            .params
            .iter()
            .filter(|(_, t)| prefixes.iter().any(|p| t.name.starts_with(p)))
            .map(|(id, _)| id)
            .collect();
        let report = finite_diff_check_params(|g| f(g, &model, &scene), &model.params, eps, &ids)?;
        if report.relu_margin < RELU_MARGIN {
            rejected += 1;
            continue;
        }
        return Ok((report, rejected));
    }
    Err(Error::InvalidArgument(format!(
        "no draw for seed {seed} cleared the ReLU margin"
    )))
}

/// Check every head, then the training objective over all parameters.
///
/// The objective check runs with `eta2 = 0` and no auxiliary heads: the
/// confidence target and the auxiliary heads' inputs are stop-gradient
/// quantities, which central differences would see through.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<GradSuiteReport> {
    let mut heads = Vec::new();
    for (name, prefixes) in HEADS {
        let (r, rejected) = check_one(seed, eps, prefixes, |g, m, s| head_loss(g, name, m, s))?;
        heads.push(HeadCheck {
            head: name.to_string(),
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            entries_checked: r.entries_checked,
            rejected,
        });
    }
    let tc = TrainConfig {
        eta2: 0.0,
        ..small_train_config()
    };
    let (r, rejected) = check_one(seed, eps, &[""], |g, m, s| Ok(scene_loss(g, m, &tc, s)?.0))?;
    heads.push(HeadCheck {
        head: "objective".into(),
        max_rel_error: r.max_rel_error,
        worst: r.worst,
        entries_checked: r.entries_checked,
        rejected,
    });
    let max_rel_error = heads.iter().map(|h| h.max_rel_error).fold(0.0, f64::max);
    Ok(GradSuiteReport {
        seed,
        eps,
        max_rel_error,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_parameter() {
        let tc = small_train_config();
        let model = Model::init(tc.model_config(), 0).unwrap();
        for (_, t) in model.params.iter() {
            assert!(
                HEADS.iter().any(|(_, ps)| ps.iter().any(|p| t.name.starts_with(p))),
                "{} not owned by any head",
                t.name
            );
        }
    }

    #[test]
    fn suite_passes_on_one_seed() {
        let r = gradient_suite(3, 1e-5).unwrap();
        assert_eq!(r.heads.len(), HEADS.len() + 1);
        assert!(r.max_rel_error < 1e-4, "{r:#?}");
    }

    #[test]
    fn bad_step_is_rejected() {
        assert!(gradient_suite(0, 0.0).is_err());
    }
}
