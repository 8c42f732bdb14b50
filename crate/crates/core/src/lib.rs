//! Dual-modal brain-imaging classifier built from hierarchical feature
//! alignments and cross-domain interactions, with a perturbation-scored
//! (gradient-free) activation mapping for explanations.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: tensor containers, dataset manifests, splitting and the
//!   synthetic cohort generator.
//! - [`features`]: static/dynamic functional connectivity, ALFF and
//!   ROI-to-volume projection.
//! - [`autograd`]: a small reverse-mode tape used by the model.
//! - [`dmha`]: convolutional encoders, multi-scale injection and the two
//!   contrastive alignments.
//! - [`ddhi`]: fine-grained and global attention interactions and the
//!   classification head.
//! - [`model`]: the assembled network.
//! - [`sam`]: synergistic activation maps and rankings.
//! - [`harness`]: configuration, training, evaluation, cross-validation and
//!   ablations.

pub mod autograd;
pub mod data;
pub mod ddhi;
pub mod dmha;
pub mod error;
pub mod features;
pub mod harness;
pub mod model;
pub mod sam;

pub use error::{Error, Result};
