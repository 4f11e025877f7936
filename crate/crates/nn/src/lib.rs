//! 3D convolutional networks (DPN and U-Net) with hand-written forward and
//! backward passes, the Dice + BCE loss, Adam/Adamax, the mixed-set sampler,
//! checkpoints and the two-stage cascade.

pub mod cascade;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod real;
pub mod sampler;
pub mod tensor;

pub use error::{NnError, Result};
pub use network::{Network, NetworkKind, NetworkSpec, ParamStore};
pub use optim::{Optimizer, TrainConfig};
pub use real::Real;
pub use tensor::FeatureMap;
