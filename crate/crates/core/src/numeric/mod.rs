//! Minimal dense numeric engine: embeddings, GRU, softmax output, Adam.
//!
//! Everything is `f64`. Gradients accumulate into [`Param::grad`] across a
//! forward/backward pass and are consumed by [`adam_step`].

pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod param;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, FdEntry, FdOptions, FdReport};
pub use gru::{gru_backward, gru_forward, GruCell, GruStep, GruTrace};
pub use layers::{
    affine_softmax, affine_softmax_xent, embedding_backward, embedding_forward, softmax_rows, XentOutput,
};
pub use param::{adam_step, AdamConfig, Param, ParamSet};
pub use tensor::Tensor2;
