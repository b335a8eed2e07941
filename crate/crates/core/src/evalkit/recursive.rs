//! Step-by-step GRU decoder used as the recursive comparison head.

use rand::Rng;

use crate::diffcore::{Activation, Dense, Graph, Node, ParamStore};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveParams {
    /// `tanh(W A + b)`, the initial hidden state.
    pub seed: Dense,
    pub update: Dense,
    pub reset: Dense,
    pub candidate: Dense,
    /// Hidden state to a coordinate displacement.
    pub out: Dense,
    pub hidden: usize,
}

impl RecursiveParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let h = cfg.recurrent_hidden;
        Ok(Self {
            seed: Dense::init(store, rng, "rec.seed", cfg.d_agent, h, Activation::Tanh)?,
            update: Dense::init(store, rng, "rec.z", 2 + h, h, Activation::Sigmoid)?,
            reset: Dense::init(store, rng, "rec.r", 2 + h, h, Activation::Sigmoid)?,
            candidate: Dense::init(store, rng, "rec.n", 2 + h, h, Activation::Tanh)?,
            out: Dense::init(store, rng, "rec.out", h, 2, Activation::Identity)?,
            hidden: h,
        })
    }
}

/// Additive disturbance of the hidden state entering step `step` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StatePerturbation {
    pub step: usize,
    pub delta: Vec<f64>,
}

/// Unroll the GRU for `steps` outputs. Each step consumes the previous
/// coordinate (the origin first) and emits `previous + displacement`.
/// Returns the flat `2 * steps` trajectory.
pub fn recursive_decode(
    g: &mut Graph<'_>,
    params: &RecursiveParams,
    a: Node,
    steps: usize,
    perturb: Option<&StatePerturbation>,
) -> Result<Node> {
    if let Some(p) = perturb {
        if p.delta.len() != params.hidden {
            return Err(Error::DimensionMismatch {
                layer: "rec.perturbation".into(),
                expected: params.hidden,
                got: p.delta.len(),
            });
        }
    }
    let mut h = params.seed.apply(g, a)?;
    let mut prev = g.input(vec![0.0, 0.0]);
    let mut points = Vec::with_capacity(steps);
    for s in 0..steps {
        if let Some(p) = perturb.filter(|p| p.step == s) {
            let d = g.input(p.delta.clone());
            h = g.add(h, d);
        }
        let xh = g.concat(&[prev, h]);
        let z = params.update.apply(g, xh)?;
        let r = params.reset.apply(g, xh)?;
        let rh = g.mul(r, h);
        let xrh = g.concat(&[prev, rh]);
        let n = params.candidate.apply(g, xrh)?;
        // h' = (1 - z) n + z h = n + z (h - n)
        let hn = g.sub(h, n);
        let zhn = g.mul(z, hn);
        h = g.add(n, zhn);
        let step = params.out.apply(g, h)?;
        let y = g.add(prev, step);
        points.push(y);
        prev = y;
    }
    Ok(g.concat(&points))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::finite_diff_check;

    fn setup(seed: u64) -> (ModelConfig, ParamStore, RecursiveParams) {
        let cfg = ModelConfig {
            d_agent: 5,
            recurrent_hidden: 6,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let p = RecursiveParams::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (cfg, store, p)
    }

    fn a_vals() -> Vec<f64> {
        vec![0.4, -0.3, 0.9, 0.1, -0.7]
    }

    #[test]
    fn length_is_traj_len() {
        let (cfg, store, p) = setup(0);
        let mut g = Graph::new(&store);
        let a = g.input(a_vals());
        let y = recursive_decode(&mut g, &p, a, cfg.traj_len(), None).unwrap();
        assert_eq!(g.value(y).len(), 26);
    }

    #[test]
    fn perturbation_is_causal() {
        let (cfg, store, p) = setup(1);
        let run = |pert: Option<&StatePerturbation>| {
            let mut g = Graph::new(&store);
            let a = g.input(a_vals());
            let y = recursive_decode(&mut g, &p, a, cfg.traj_len(), pert).unwrap();
            g.value(y).to_vec()
        };
        let base = run(None);
        for s in 0..cfg.traj_len() {
            let pert = StatePerturbation {
                step: s,
                delta: vec![0.5, -0.25, 0.1, 0.3, -0.6, 0.2],
            };
            let out = run(Some(&pert));
            assert_eq!(out[..2 * s], base[..2 * s], "step {s}");
            assert_ne!(out[2 * s..2 * s + 2], base[2 * s..2 * s + 2], "step {s}");
        }
    }

    #[test]
    fn unrolled_gradcheck() {
        for seed in 0..4 {
            let (cfg, store, p) = setup(seed);
            let target: Vec<f64> = (0..26).map(|i| 0.2 * i as f64).collect();
            let r = finite_diff_check(
                |g| {
                    let a = g.input(a_vals());
                    let y = recursive_decode(g, &p, a, cfg.traj_len(), None)?;
                    let t = g.input(target.clone());
                    g.mse(y, t)
                },
                &store,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
