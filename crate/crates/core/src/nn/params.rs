use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mat::Mat;
use crate::error::{Error, Result};

/// Index of a parameter block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, fixed-shape array of weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_mat(&self) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
        }
    }
}

/// How a freshly registered block is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` with fan_in = cols.
    Glorot,
    Zeros,
    Ones,
}

/// Ordered collection of parameter blocks. Registration order fixes the
/// flat layout used by the optimizer and by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter block `{name}`"
        );
        let n = rows * cols;
        let data = match init {
            Init::Glorot => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.push(ParamBlock {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn push(&mut self, block: ParamBlock) -> ParamId {
        let id = ParamId(self.blocks.len());
        self.index.insert(block.name.clone(), id.0);
        self.blocks.push(block);
        id
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    /// Overwrites the values of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let b = &mut self.blocks[id.0];
        if values.len() != b.data.len() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{} values for block `{}` of {}", values.len(), b.name, b.data.len()),
            ));
        }
        b.data.copy_from_slice(values);
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        for b in &mut self.blocks {
            b.data.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers aligned block-for-block with a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    blocks: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            blocks: store.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn block(&self, id: ParamId) -> &[f64] {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.blocks[id.0]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `self += other`, block by block in a fixed order.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}
