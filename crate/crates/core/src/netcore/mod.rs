//! Neural building blocks: tensors, reverse-mode autodiff, declarative
//! layer graphs, Adam, and checkpoint persistence.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta};
pub use graph::{Graph, Var};
pub use network::{Bound, ForwardCtx, Init, LayerSpec, Network, Stage};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
