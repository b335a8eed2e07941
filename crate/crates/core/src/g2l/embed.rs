use crate::diffcore::{Graph, Node, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::EmbeddingMode;

/// Sinusoidal embedding: `p[2i] = sin(idx / 10000^(2i/D))`, `p[2i+1] = cos(..)`.
pub fn sinusoidal(index: usize, dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    for (k, v) in p.iter_mut().enumerate() {
        let i = k / 2;
        let angle = index as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        *v = if k % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    p
}

/// Rows `0..=1 + 2N`, either fixed sinusoids or a learned `[rows, D]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbeddingTable {
    pub mode: EmbeddingMode,
    pub dim: usize,
    pub rows: usize,
    pub learned: Option<ParamId>,
    fixed: Vec<Vec<f64>>,
}

impl PositionEmbeddingTable {
    /// Learnable tables start from the sinusoids.
    pub fn init(store: &mut ParamStore, mode: EmbeddingMode, rows: usize, dim: usize) -> Result<Self> {
        let fixed: Vec<Vec<f64>> = (0..rows).map(|i| sinusoidal(i, dim)).collect();
        let learned = match mode {
            EmbeddingMode::StaticSinusoidal => None,
            EmbeddingMode::Learnable => {
                Some(store.add("g2l.pos", vec![rows, dim], fixed.concat())?)
            }
        };
        Ok(Self {
            mode,
            dim,
            rows,
            learned,
            fixed,
        })
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.rows {
            return Err(Error::InvalidArgument(format!(
                "position index {index} outside 0..{}",
                self.rows
            )));
        }
        Ok(())
    }

    pub fn node(&self, g: &mut Graph<'_>, index: usize) -> Result<Node> {
        self.check(index)?;
        Ok(match self.learned {
            Some(id) => g.param_row(id, index),
            None => g.input(self.fixed[index].clone()),
        })
    }
}

/// Embedding vector for `index`.
pub fn position_embedding(
    index: usize,
    table: &PositionEmbeddingTable,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    table.check(index)?;
    Ok(match table.learned {
        Some(id) => store.get(id).row(index).to_vec(),
        None => table.fixed[index].clone(),
    })
}
