//! Temporal asynchronous alignment contrastive learning.
//!
//! Token-level TopK soft matching between encoded time-series windows, an
//! InfoNCE loss built on it, a dilated-convolution encoder with channel
//! attention, and the pretrain / freeze / classify pipeline around them.

pub mod encoder;
pub mod error;
pub mod loss;
pub mod mat;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod similarity;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
pub use mat::{topk_row, Mat, Tensor3};
pub use tape::{check_grad, Gradients, Tape, Var};
