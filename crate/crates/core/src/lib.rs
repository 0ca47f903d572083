//! Magnitude weight pruning laboratory for a small BERT-style encoder.

pub mod analysis;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use container::Container;
pub use error::{Error, Result};
pub use model::{Gradients, Model, ModelConfig, PrunableSet};
pub use rng::RngState;
pub use tensor::Tensor2D;
