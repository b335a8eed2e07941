//! Model configuration and the full parameter layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{LossKind, ParamStore};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::evalkit::recursive::RecursiveParams;
use crate::g2l::{build_key_groups, G2lParams, KeyStepGroup};
use crate::selector::ConfidenceHeadParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    #[default]
    StaticSinusoidal,
    Learnable,
}

/// Which fine key feeds the confidence head as the trajectory tail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKey {
    /// The last fine key, index `1 + 2N` (13 for a 12-step horizon).
    #[default]
    LastKey,
    /// The last fine key at or before the horizon (11 for a 12-step horizon).
    NearestHorizon,
}

/// Decoding heads that can turn agent features into a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    G2l,
    Simultaneous,
    Recursive,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "g2l" => Ok(HeadKind::G2l),
            "simultaneous" => Ok(HeadKind::Simultaneous),
            "recursive" => Ok(HeadKind::Recursive),
            other => Err(Error::InvalidArgument(format!("unknown head `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::G2l => "g2l",
            HeadKind::Simultaneous => "simultaneous",
            HeadKind::Recursive => "recursive",
        }
    }
}

/// Architecture hyper-parameters shared by every module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_p: usize,
    pub t_f: usize,
    pub k_modes: usize,
    /// Position-embedding width D.
    pub d_embed: usize,
    /// Agent-feature width D_A.
    pub d_agent: usize,
    /// Hidden width of every two-layer MLP.
    pub hidden: usize,
    pub recurrent_hidden: usize,
    pub granularities: Vec<usize>,
    pub embedding: EmbeddingMode,
    pub share_fill_heads: bool,
    pub use_neighbors: bool,
    pub tail_key: TailKey,
    pub loss_kind: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_p: 8,
            t_f: 12,
            k_modes: 5,
            d_embed: 64,
            d_agent: 64,
            hidden: 128,
            recurrent_hidden: 64,
            granularities: vec![2, 4, 8],
            embedding: EmbeddingMode::StaticSinusoidal,
            share_fill_heads: true,
            use_neighbors: true,
            tail_key: TailKey::LastKey,
            loss_kind: LossKind::Mse,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_p < 2 || self.t_f < 2 {
            return Err(Error::Config("t_p and t_f must be at least 2".into()));
        }
        if self.k_modes == 0 {
            return Err(Error::Config("k_modes must be at least 1".into()));
        }
        if self.d_embed == 0 || self.d_agent == 0 || self.hidden == 0 || self.recurrent_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        build_key_groups(self.t_f, &self.granularities).map(|_| ())
    }

    /// N for the finest group: smallest N with `1 + 2N >= t_f`.
    pub fn n_fine(&self) -> usize {
        self.t_f / 2
    }

    /// Length of every generated trajectory, `1 + 2N`.
    pub fn traj_len(&self) -> usize {
        1 + 2 * self.n_fine()
    }

    pub fn n_granularities(&self) -> usize {
        self.granularities.len()
    }
}

/// A configuration together with every learnable tensor.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub groups: Vec<KeyStepGroup>,
    pub encoder: EncoderParams,
    pub g2l: G2lParams,
    pub selector: ConfidenceHeadParams,
    pub recursive: RecursiveParams,
}

impl Model {
    /// Fresh parameters: Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let groups = build_key_groups(config.t_f, &config.granularities)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::init(&config, &mut params, &mut rng)?;
        let g2l = G2lParams::init(&config, &groups, &mut params, &mut rng)?;
        let selector = ConfidenceHeadParams::init(&config, &mut params, &mut rng)?;
        let recursive = RecursiveParams::init(&config, &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            groups,
            encoder,
            g2l,
            selector,
            recursive,
        })
    }

    /// Rebuild the layout over an existing store. Every tensor the config
    /// requires must be present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Model::init(config, 0)?;
        for (_, t) in template.params.iter() {
            let id = params
                .id(&t.name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{}`", t.name)))?;
            if params.get(id).shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    t.name,
                    t.shape,
                    params.get(id).shape
                )));
            }
        }
        if params.len() != template.params.len() {
            let extra = params
                .sorted()
                .find(|t| template.params.id(&t.name).is_err())
                .map(|t| t.name.clone())
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        let mut model = template;
        model.params.load_from(&params)?;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.total_numel()
    }
}
