//! Tensors, an eager autodiff tape, and the convolutional Gaussian policy.

pub mod checkpoint;
pub mod gaussian;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod spec;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use gaussian::{gaussian_entropy, gaussian_kl, gaussian_log_prob, gaussian_sample};
pub use model::{batch_input, forward, forward_graph, init_params, Bound, ForwardOutput, Outputs, ParameterSet};
pub use optim::{Adam, AdamConfig};
pub use spec::{arch_preset, conv_preset, Activation, ConvSpec, NetworkKind, NetworkSpec};
pub use tape::{Graph, NodeMap, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unsupported input resolution {0}; expected 32, 80, 128 or 256")]
    UnsupportedResolution(usize),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
