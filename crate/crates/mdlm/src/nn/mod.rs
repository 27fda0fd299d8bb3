//! Dense tensors, reverse-mode differentiation, transformer primitives and
//! multiply-add instrumentation.

pub mod graph;
pub mod layers;
pub mod mac;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use layers::{attention, transformer_block};
pub use mac::MacCounter;
pub use rng::ModelRng;
pub use tensor::{Scalar, Tensor};
