//! Deterministic feed-forward network kernel operating on flat parameter vectors.

mod fragment;
mod gradcheck;
mod init;
mod loss;
mod net;
mod optim;
pub(crate) mod scalar;
mod spec;
mod tensor;

use thiserror::Error;

pub use fragment::{decode_fragment, encode_fragment, fragment_len, read_fragment, write_fragment};
pub use gradcheck::{finite_diff_grad, max_relative_error, network_finite_diff_grad, relative_error, DEFAULT_FD_STEP};
pub use init::init_params;
pub use loss::{argmax, cross_entropy_loss};
pub use net::{backward, backward_trace, forward, forward_trace, Trace};
pub use optim::{sgd_step, Sgd};
pub use scalar::Scalar;
pub use spec::{param_count, LayerSlot, LayerSpec, NetworkSpec};
pub use tensor::{GradVector, ParamVector, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("layer {layer} ({kind}): {msg}")]
    LayerShape { layer: usize, kind: LayerSpec, msg: String },
    #[error("input shape {actual:?} does not match [batch, {expected:?}]")]
    InputShape { expected: Shape, actual: Shape },
    #[error("output gradient shape {actual:?} does not match output {expected:?}")]
    OutputGradShape { expected: Shape, actual: Shape },
    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("non-finite activation produced by layer {layer} ({kind}) at index {index}")]
    NumericLayer { layer: usize, kind: LayerSpec, index: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("fragment at byte {offset}: {msg}")]
    Fragment { offset: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}
