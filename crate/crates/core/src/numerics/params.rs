use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

/// Which parameter set a block belongs to.
///
/// The detector-side parameters form one set and the LTV-side parameters the
/// other; the shared purchase-rate head and the feature layers sit in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Embedding and interaction layers feeding every head.
    Shared,
    /// Game-whale detector only.
    Detector,
    /// LTV experts only.
    Ltv,
    /// Purchase-rate head used by both the detector and the LTV loss.
    DetectorAndLtv,
}

impl Role {
    pub fn in_detector(self) -> bool {
        matches!(self, Role::Shared | Role::Detector | Role::DetectorAndLtv)
    }

    pub fn in_ltv(self) -> bool {
        matches!(self, Role::Shared | Role::Ltv | Role::DetectorAndLtv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub(crate) usize);

impl BlockId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One trainable array with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub role: Role,
    pub value: Matrix,
    pub grad: Matrix,
}

/// All trainable parameters of a model, addressed by [`BlockId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    /// Backward passes accumulated since the last [`ParamStore::zero_grad`].
    accumulated: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Matrix) -> BlockId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.blocks.push(ParamBlock {
            name: name.into(),
            role,
            value,
            grad,
        });
        BlockId(self.blocks.len() - 1)
    }

    /// Adds a block initialized uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        role: Role,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> BlockId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("shape is consistent");
        self.add(name, role, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, role: Role, rows: usize, cols: usize) -> BlockId {
        self.add(name, role, Matrix::zeros(rows, cols))
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn block(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn value(&self, id: BlockId) -> &Matrix {
        &self.blocks[id.0].value
    }

    pub fn grad_mut(&mut self, id: BlockId) -> &mut Matrix {
        &mut self.blocks[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
        self.accumulated = 0;
    }

    pub(crate) fn mark_accumulated(&mut self) {
        self.accumulated += 1;
    }

    pub fn accumulated(&self) -> usize {
        self.accumulated
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }
}
