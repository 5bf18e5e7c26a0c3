//! Reinforcement-learning evasion attacks against a CNN image classifier
//! under four confidence-disclosure scenarios, including a Dirichlet
//! noise defense.

pub mod analytics;
pub mod classifier;
pub mod dataset;
pub mod env;
pub mod error;
pub mod numnet;
pub mod oracle;
pub mod ppo;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
