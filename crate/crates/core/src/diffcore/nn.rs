use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::graph::{Graph, Node};
use crate::diffcore::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Node) -> Node {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// One affine layer `act(W x + b)` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Registers `{name}.w` (Glorot uniform) and `{name}.b` (zeros).
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let weight = store.glorot(&format!("{name}.w"), out_dim, in_dim, rng)?;
        let bias = store.zeros(&format!("{name}.b"), vec![out_dim])?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    /// Rebind to the tensors of an existing store.
    pub fn bind(
        store: &ParamStore,
        name: &str,
        activation: Activation,
    ) -> Result<Self> {
        let weight = store.id(&format!("{name}.w"))?;
        let bias = store.id(&format!("{name}.b"))?;
        let (out_dim, in_dim) = store.get(weight).dims2();
        if store.get(bias).numel() != out_dim {
            return Err(Error::DimensionMismatch {
                layer: name.to_string(),
                expected: out_dim,
                got: store.get(bias).numel(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Node) -> Result<Node> {
        let got = g.value(x).len();
        if got != self.in_dim {
            return Err(Error::DimensionMismatch {
                layer: self.name.clone(),
                expected: self.in_dim,
                got,
            });
        }
        let y = g.affine(self.weight, Some(self.bias), x);
        Ok(self.activation.apply(g, y))
    }

    /// Apply the layer to an input given as column blocks `(offset, part)`.
    /// `pre` is an optional already-computed partial product to add.
    pub fn apply_blocks(
        &self,
        g: &mut Graph<'_>,
        pre: Option<Node>,
        blocks: &[(usize, Node)],
    ) -> Result<Node> {
        let mut terms: Vec<Node> = pre.into_iter().collect();
        for &(col, x) in blocks {
            let len = g.value(x).len();
            if col + len > self.in_dim {
                return Err(Error::DimensionMismatch {
                    layer: self.name.clone(),
                    expected: self.in_dim,
                    got: col + len,
                });
            }
            terms.push(g.matvec_cols(self.weight, col, x));
        }
        let b = g.param(self.bias);
        terms.push(b);
        let y = g.sum_of(&terms)?;
        Ok(self.activation.apply(g, y))
    }
}

/// A stack of [`Dense`] layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; hidden layers use `hidden_act`, the last `out_act`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{prefix}: an MLP needs at least input and output widths"
            )));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { out_act } else { hidden_act };
                Dense::init(store, rng, &format!("{prefix}.{i}"), dims[i], dims[i + 1], act)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        n_layers: usize,
        hidden_act: Activation,
        out_act: Activation,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| {
                let act = if i + 1 == n_layers { out_act } else { hidden_act };
                Dense::bind(store, &format!("{prefix}.{i}"), act)
            })
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    layer: pair[1].name.clone(),
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// Evaluate an MLP on the tape.
pub fn mlp_apply(g: &mut Graph<'_>, mlp: &Mlp, x: Node) -> Result<Node> {
    mlp.layers.iter().try_fold(x, |h, layer| layer.apply(g, h))
}
