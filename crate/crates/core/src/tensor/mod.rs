//! Dense and sparse tensor containers and the reverse-mode differentiation
//! engine they plug into.

mod dense;
mod graph;
mod ops;
mod params;
mod sparse;

pub use dense::DenseTensor;
pub use graph::{BackwardFn, Gradients, Graph, NodeRef, StatUpdate};
pub use params::{BufferEntry, BufferId, ParamEntry, ParamId, ParamStore};
pub use sparse::{CoordSet, Coord, SparseVoxelTensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: incompatible operands ({detail})")]
    Incompatible { op: &'static str, detail: String },
    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss was not produced by recorded operations")]
    NotRecorded,
    #[error("graph was already differentiated; build a new graph per step")]
    AlreadyBackpropagated,
    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoordinate(Coord),
    #[error("voxel coordinate {coord:?} outside lattice {lattice:?}")]
    OutOfBounds { coord: Coord, lattice: [usize; 3] },
}
