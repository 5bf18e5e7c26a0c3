//! Minimal differentiable-network substrate: conv2d, dense, relu, flatten,
//! softmax/cross-entropy and Adam, all on `f32`.

pub mod adam;
pub mod checkpoint;
mod gemm;
mod layer;
mod network;
pub mod ops;

pub use adam::{AdamConfig, AdamState};
pub use layer::{Conv2d, Dense, Layer, LayerSpec};
pub use network::{Network, Parameterized};
pub use ops::{argmax, cross_entropy, log_softmax, softmax, softmax_in_place};
