//! Adaptive multi-thickness topology optimization.

pub mod driver;
pub mod export;
pub mod fem;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod optimizer;
pub mod regularization;
pub mod scalar;

pub use material::TargetSet;
pub use scalar::Scalar;

pub type Mesh = mesh::AdaptiveMesh<f64>;
pub type Field = mesh::DensityField<f64>;
