//! Adam and AdamW with bias correction.

use serde::{Deserialize, Serialize};

use crate::diffcore::graph::Gradients;
use crate::diffcore::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay, if any, is folded into the gradient (L2 penalty).
    Adam,
    /// Weight decay is applied directly to the parameters.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter. Every parameter must have a gradient
    /// entry; use [`Gradients::densify`] for parameters the loss did not reach.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step_masked(params, grads, |_| true)
    }

    /// Like [`step`](Self::step) but only parameters for which `trainable`
    /// returns true are touched; the rest keep their values and moments.
    pub fn step_masked(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        let ids: Vec<ParamId> = params.ids().filter(|id| trainable(*id)).collect();
        for &id in &ids {
            if grads.get(id).is_none() {
                return Err(Error::MissingGradient(params.get(id).name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let theta = &mut params.get_mut(id).values;
            for i in 0..theta.len() {
                let mut gi = g[i];
                if c.kind == OptimizerKind::Adam {
                    gi += c.weight_decay * theta[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if c.kind == OptimizerKind::Adamw {
                    theta[i] -= c.lr * c.weight_decay * theta[i];
                }
                theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::Graph;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", vec![1], vec![v]).unwrap();
        (s, id)
    }

    fn const_grad(store: &ParamStore, id: ParamId, g: f64) -> Gradients {
        // build a loss g * theta so the gradient is exactly g
        let mut graph = Graph::new(store);
        let p = graph.param(id);
        let l = graph.scale(p, g);
        let l = graph.sum(l);
        graph.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut store = ParamStore::new();
        store.add("a", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = store.clone();
        let mut grads = Gradients::empty(1);
        grads.densify(&store);
        let mut opt = OptimizerState::new(AdamConfig::adam(0.01), &store);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adamw_zero_gradient_scales_by_decay() {
        let mut store = ParamStore::new();
        let id = store.add("a", vec![2], vec![2.0, -4.0]).unwrap();
        let mut grads = Gradients::empty(1);
        grads.densify(&store);
        let (lr, wd) = (0.1, 0.5);
        let mut opt = OptimizerState::new(AdamConfig::adamw(lr, wd), &store);
        opt.step(&mut store, &grads).unwrap();
        let f = 1.0 - lr * wd;
        assert_eq!(store.get(id).values, vec![2.0 * f, -4.0 * f]);
    }

    #[test]
    fn missing_gradient_is_error() {
        let (mut store, _) = scalar_store(1.0);
        let grads = Gradients::empty(1);
        let mut opt = OptimizerState::new(AdamConfig::adam(0.01), &store);
        assert!(matches!(
            opt.step(&mut store, &grads),
            Err(Error::MissingGradient(n)) if n == "theta"
        ));
    }

    /// Independent scalar transcription of Adam.
    fn reference_adam(theta0: f64, g: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
            out.push(th);
        }
        out
    }

    #[test]
    fn constant_gradient_descends_like_reference() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = OptimizerState::new(AdamConfig::adam(0.01), &store);
        let reference = reference_adam(1.0, 0.7, 100, 0.01);
        let mut prev = 1.0;
        for r in reference {
            let grads = const_grad(&store, id, 0.7);
            opt.step(&mut store, &grads).unwrap();
            let now = store.get(id).values[0];
            assert!(now < prev);
            assert!((now - r).abs() < 1e-12, "{now} vs {r}");
            prev = now;
        }
    }

    #[test]
    fn masked_step_leaves_frozen_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", vec![1], vec![1.0]).unwrap();
        let b = store.add("b", vec![1], vec![1.0]).unwrap();
        let mut graph = Graph::new(&store);
        let pa = graph.param(a);
        let pb = graph.param(b);
        let s = graph.add(pa, pb);
        let l = graph.sum(s);
        let grads = graph.backward(l).unwrap();
        drop(graph);
        let mut opt = OptimizerState::new(AdamConfig::adam(0.1), &store);
        opt.step_masked(&mut store, &grads, |id| id == a).unwrap();
        assert!(store.get(a).values[0] < 1.0);
        assert_eq!(store.get(b).values[0], 1.0);
    }
}
