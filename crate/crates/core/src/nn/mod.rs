//! Numeric building blocks with hand-derived backward passes.
//!
//! There is no autodiff graph: every differentiable operation exposes a
//! forward function and a matching backward function, and each pair is
//! verified against central finite differences in [`gradcheck`].

pub mod adam;
pub mod gradcheck;
pub mod lstm;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, check_model, GradCheck};
pub use lstm::{bilstm_run, lstm_cell_backward, lstm_cell_step, BiLstm, LstmCellParams, LstmStack};
pub use ops::{affine, affine_backward, dropout, sigmoid, softmax, softmax_backward};
pub use params::Parameterized;
pub use tensor::Tensor2;

/// Half-width of the uniform initialization range.
pub const INIT_SCALE: f64 = 0.1;

/// Global-norm threshold for gradient clipping during training.
pub const CLIP_NORM: f64 = 5.0;
