//! Dense tensors, a reverse-mode differentiation tape, MLPs, optimizers and
//! the binary weight format.

mod graph;
mod mlp;
mod optim;
mod tensor;
mod weights;

pub use graph::{DTensor, Graph};
pub use mlp::{Activation, BoundLayer, BoundMlp, Init, Layer, MlpGrads, MlpNetwork};
pub use optim::{cosine_lr, AdamConfig, OptimizerState};
pub use tensor::Tensor;
pub use weights::{
    decode_weights, encode_weights, load_weights, read_metadata, save_weights, write_metadata,
    ModelMetadata, WEIGHT_FORMAT_VERSION, WEIGHT_MAGIC,
};

pub(crate) use tensor::gemm;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input has {got} features, network expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient in layer {layer}; training diverged")]
    NonFiniteGradient { layer: usize },
    #[error("weight file does not start with the SPVN magic")]
    BadMagic,
    #[error("weight file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("weight file truncated: {0}")]
    Truncated(String),
    #[error("weight file malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
