//! Minimal reverse-mode tensor engine: NCHW convolution, windowed
//! multi-head attention, the handful of pointwise and reduction ops the
//! vfiqa metric needs, and AdamW.

pub mod attention;
pub mod element;
mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionTrace, AttentionWeights, WindowPlan};
pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use ops::{conv2d_output_extent, AttentionMask};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub use ops::PROB_CLAMP;
