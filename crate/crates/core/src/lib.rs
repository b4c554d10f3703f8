//! Ensemble self-training for unsupervised domain adaptation of semantic
//! segmentation.
//!
//! A shared encoder feeds three classifier heads, each trained on a different
//! image translation of the labeled source domain. A sparse multinomial
//! logistic regression fuses the heads per class, and its confident outputs
//! become pseudo-labels for rounds of self-training on the unlabeled target
//! domain.

pub mod autodiff;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod nets;
pub mod trainer;
pub mod translate;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
