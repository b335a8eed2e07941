//! Trajectory forecasting with global-to-local decoding: fine key steps are
//! predicted at once, then the gaps are filled by midpoint heads from coarse
//! intervals to single steps.

pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod g2l;
pub mod gradsuite;
pub mod inference;
pub mod io;
pub mod model;
pub mod selector;
pub mod trainer;

pub use data::{Scene, SceneSet, TrajPoint};
pub use error::{Error, Result};
pub use model::{EmbeddingMode, HeadKind, Model, ModelConfig, TailKey};
