//! Reverse-mode differentiation, dense networks and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Bind, Grads, Graph, NodeId};
pub use mlp::Mlp;
pub use optim::{clip_global_norm, global_norm, Adam};
pub use params::{read_checkpoint, write_checkpoint, ParamSet};
pub use tensor::{Real, Tensor};
