//! LiDAR semantic scene completion: voxelization, a bird's-eye-view
//! completion network fused with a sparse 3D segmentation branch, losses,
//! metrics and a training harness, all on a small reverse-mode autodiff core.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod gradcheck;
pub mod kitti;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use scalar::Scalar;

pub type Tensor = tensor::DenseTensor<f64>;
pub type SparseTensor = tensor::SparseVoxelTensor<f64>;
pub type Model = model::SsaScModel<f64>;
