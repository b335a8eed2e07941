//! Granularity confidence: predicted scores, ADE-based targets, their loss,
//! and inference that only generates the most confident granularity.

use rand::Rng;

use crate::data::TrajPoint;
use crate::diffcore::{
    mlp_apply, regression_loss, softmax, Activation, Graph, LossKind, Mlp, Node, ParamId, ParamStore,
};
use crate::error::{Error, Result};
use crate::g2l::{
    generate_trajectory_cached, FillCache, G2lParams, GranularityTrajectory, KeyPrediction,
    KeyStepGroup, LevelOrder,
};
use crate::model::{ModelConfig, TailKey};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceHeadParams {
    /// `2 + 2 + D_A -> hidden -> M`.
    pub psi: Mlp,
    pub logvar: Option<ParamId>,
}

impl ConfidenceHeadParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let m = cfg.n_granularities();
        let psi = Mlp::init(
            store,
            rng,
            "sel",
            &[4 + cfg.d_agent, cfg.hidden, m],
            Activation::Relu,
            Activation::Identity,
        )?;
        let logvar = match cfg.loss_kind {
            LossKind::NllGaussian => Some(store.zeros("sel.logvar", vec![m])?),
            _ => None,
        };
        Ok(Self { psi, logvar })
    }
}

/// Step index of the key that feeds the confidence head as the tail.
pub fn tail_step(cfg: &ModelConfig) -> usize {
    match cfg.tail_key {
        TailKey::LastKey => cfg.traj_len(),
        TailKey::NearestHorizon => {
            if cfg.t_f % 2 == 1 {
                cfg.t_f
            } else {
                cfg.t_f - 1
            }
        }
    }
}

/// `softmax(psi_c(Z_head || Z_tail || A))`.
pub fn confidence_scores(
    g: &mut Graph<'_>,
    z_head: Node,
    z_tail: Node,
    a: Node,
    params: &ConfidenceHeadParams,
) -> Result<Node> {
    let x = g.concat(&[z_head, z_tail, a]);
    let logits = mlp_apply(g, &params.psi, x)?;
    g.softmax(logits)
}

/// Target confidences: softmax of negative ADE over the first `t_f` steps.
pub fn gt_confidence(trajectories: &[Vec<TrajPoint>], truth: &[TrajPoint], t_f: usize) -> Result<Vec<f64>> {
    if truth.len() < t_f {
        return Err(Error::ShapeMismatch(format!(
            "ground truth has {} steps, need {t_f}",
            truth.len()
        )));
    }
    let neg: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            if t.len() < t_f {
                return Err(Error::ShapeMismatch(format!("trajectory has {} steps, need {t_f}", t.len())));
            }
            let s: f64 = t.iter().zip(truth).take(t_f).map(|(a, b)| a.dist(*b)).sum();
            Ok(-s / t_f as f64)
        })
        .collect::<Result<_>>()?;
    softmax(&neg)
}

/// Softmax of negative ADE values.
pub fn confidence_from_ades(ades: &[f64]) -> Result<Vec<f64>> {
    let neg: Vec<f64> = ades.iter().map(|a| -a).collect();
    softmax(&neg)
}

pub fn confidence_loss(
    g: &mut Graph<'_>,
    c_hat: Node,
    c: &[f64],
    kind: LossKind,
    logvar: Option<ParamId>,
) -> Result<Node> {
    let m = g.value(c_hat).len();
    if m != c.len() {
        return Err(Error::ShapeMismatch(format!(
            "confidence vectors of length {m} and {}",
            c.len()
        )));
    }
    let pred = match kind {
        LossKind::NllGaussian => {
            let id = logvar.ok_or_else(|| Error::Config("Gaussian NLL needs a log-variance parameter".into()))?;
            let lv = g.param(id);
            g.concat(&[c_hat, lv])
        }
        _ => c_hat,
    };
    let t = g.input(c.to_vec());
    regression_loss(g, kind, pred, t)
}

/// First index of the maximum.
pub fn argmax_first(c: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in c.iter().enumerate() {
        if *v > c[best] {
            best = i;
        }
    }
    best
}

/// One mode's selected output.
#[derive(Clone, Debug)]
pub struct Selection {
    /// Position of the chosen granularity in the chain.
    pub chosen: usize,
    pub granularity: usize,
    pub confidences: Vec<f64>,
    pub trajectory: GranularityTrajectory,
}

/// Score the granularities, then run generation only for the winner and
/// the finer groups its tail inheritance needs. Ties pick the finer group.
#[allow(clippy::too_many_arguments)]
pub fn select_and_generate(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    groups: &[KeyStepGroup],
    g2l: &G2lParams,
    sel: &ConfidenceHeadParams,
    keys: &KeyPrediction,
    cache: &mut FillCache,
) -> Result<Selection> {
    let head = keys.at_step(1)?;
    let tail = keys.at_step(tail_step(cfg))?;
    let c_hat = confidence_scores(g, head, tail, cache.agent(), sel)?;
    let confidences = g.value(c_hat).to_vec();
    let chosen = argmax_first(&confidences);

    let mut needed = vec![false; groups.len()];
    let mut m = chosen;
    loop {
        needed[m] = true;
        match groups[m].inherits_tail_from {
            Some(l) => {
                m = groups
                    .iter()
                    .position(|grp| grp.granularity == l)
                    .ok_or_else(|| Error::Config(format!("no group with granularity {l}")))?
            }
            None => break,
        }
    }

    let mut done: Vec<GranularityTrajectory> = Vec::new();
    for (m, group) in groups.iter().enumerate() {
        if !needed[m] {
            continue;
        }
        let donor = group
            .inherits_tail_from
            .and_then(|l| done.iter().find(|t| t.granularity == l));
        let t = generate_trajectory_cached(
            g,
            group,
            &keys.for_group(group),
            cache,
            g2l.heads_for(m),
            &g2l.embedding,
            cfg.traj_len(),
            donor,
            LevelOrder::Forward,
        )?;
        done.push(t);
    }
    let trajectory = done.pop().expect("chosen group generated last");
    Ok(Selection {
        chosen,
        granularity: groups[chosen].granularity,
        confidences,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::finite_diff_check;
    use crate::g2l::{build_key_groups, generate_all, predict_keys};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_embed: 6,
            d_agent: 5,
            hidden: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_uniform() {
        let c = cfg();
        let mut store = ParamStore::new();
        let p = ConfidenceHeadParams::init(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for l in &p.psi.layers {
            store.get_mut(l.weight).values.fill(0.0);
        }
        let mut g = Graph::new(&store);
        let zh = g.input(vec![1.0, 2.0]);
        let zt = g.input(vec![3.0, -4.0]);
        let a = g.input(vec![0.5; 5]);
        let s = confidence_scores(&mut g, zh, zt, a, &p).unwrap();
        for v in g.value(s) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn scores_sum_to_one() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ConfidenceHeadParams::init(&c, &mut store, &mut rng).unwrap();
        for _ in 0..100 {
            let mut g = Graph::new(&store);
            let zh = g.input(vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
            let zt = g.input(vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
            let a = g.input((0..5).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let s = confidence_scores(&mut g, zh, zt, a, &p).unwrap();
            let total: f64 = g.value(s).iter().sum();
            assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn scores_gradcheck() {
        let c = cfg();
        let mut store = ParamStore::new();
        let p = ConfidenceHeadParams::init(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let r = finite_diff_check(
            |g| {
                let zh = g.input(vec![0.3, -0.2]);
                let zt = g.input(vec![4.0, 1.0]);
                let a = g.input(vec![0.1, -0.4, 0.8, 0.0, 0.6]);
                let s = confidence_scores(g, zh, zt, a, &p)?;
                confidence_loss(g, s, &[0.2, 0.5, 0.3], LossKind::Mse, None)
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn ground_truth_examples() {
        let truth: Vec<TrajPoint> = (0..4).map(|i| TrajPoint::new(i as f64, 0.0)).collect();
        let same = vec![truth.clone(); 3];
        for v in gt_confidence(&same, &truth, 4).unwrap() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // constant offsets of 1, 2, 3 metres give ADEs 1, 2, 3
        let shifted: Vec<Vec<TrajPoint>> = (1..=3)
            .map(|d| truth.iter().map(|p| *p + TrajPoint::new(0.0, d as f64)).collect())
            .collect();
        let c = gt_confidence(&shifted, &truth, 4).unwrap();
        for (a, b) in c.iter().zip([0.66524, 0.24473, 0.09003]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
        let far: Vec<TrajPoint> = truth.iter().map(|p| *p + TrajPoint::new(9.0, 9.0)).collect();
        let c = gt_confidence(&[far.clone(), truth.clone(), far], &truth, 4).unwrap();
        assert!(c[1] > c[0] && c[1] > c[2]);
    }

    #[test]
    fn extra_steps_are_ignored() {
        let truth: Vec<TrajPoint> = (0..3).map(|i| TrajPoint::new(i as f64, 0.0)).collect();
        let mut long = truth.clone();
        long.push(TrajPoint::new(100.0, 100.0));
        let c = gt_confidence(&[long, truth.clone()], &truth, 3).unwrap();
        assert_eq!(c, vec![0.5, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(vec![1.0, 0.0]);
        let l = confidence_loss(&mut g, a, &[0.0, 1.0], LossKind::Mse, None).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let b = g.input(vec![0.5, 0.5]);
        let l = confidence_loss(&mut g, b, &[0.5, 0.5], LossKind::Mse, None).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(confidence_loss(&mut g, b, &[1.0], LossKind::Mse, None).is_err());
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_first(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax_first(&[0.5, 0.5]), 0);
    }

    #[test]
    fn tail_steps() {
        let mut c = cfg();
        assert_eq!(tail_step(&c), 13);
        c.tail_key = TailKey::NearestHorizon;
        assert_eq!(tail_step(&c), 11);
    }

    #[test]
    fn pruned_equals_exhaustive() {
        let c = cfg();
        let groups = build_key_groups(c.t_f, &c.granularities).unwrap();
        let mut hits = [0usize; 3];
        for seed in 0..50 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g2l = G2lParams::init(&c, &groups, &mut store, &mut rng).unwrap();
            let sel = ConfidenceHeadParams::init(&c, &mut store, &mut rng).unwrap();
            let a_vals: Vec<f64> = (0..c.d_agent).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let mut g = Graph::new(&store);
            let a = g.input(a_vals.clone());
            let keys = predict_keys(&mut g, &g2l.key_head, a).unwrap();
            let mut cache = FillCache::new(a);
            let pruned = select_and_generate(&mut g, &c, &groups, &g2l, &sel, &keys, &mut cache).unwrap();
            let pruned_vals = pruned.trajectory.flat_values(&g);

            let mut g = Graph::new(&store);
            let a = g.input(a_vals);
            let keys = predict_keys(&mut g, &g2l.key_head, a).unwrap();
            let mut cache = FillCache::new(a);
            let all = generate_all(&mut g, &c, &groups, &g2l, &keys, &mut cache).unwrap();
            let s = confidence_scores(&mut g, keys.keys[0], keys.keys[6], a, &sel).unwrap();
            let m = argmax_first(g.value(s));
            assert_eq!(m, pruned.chosen);
            assert_eq!(all[m].flat_values(&g), pruned_vals, "seed {seed}");
            hits[m] += 1;
        }
        assert!(hits.iter().filter(|h| **h > 0).count() >= 2, "{hits:?}");
    }
}
