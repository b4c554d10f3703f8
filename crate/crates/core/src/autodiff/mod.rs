//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Values are computed eagerly and appended to a [`Tape`]; a backward pass
//! walks the tape in reverse. The operator set covers what the segmentation
//! networks, the discriminator and the losses need, nothing more.
//! Reductions always accumulate in a fixed order, so two runs over the same
//! inputs produce identical buffers.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::Padding;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
