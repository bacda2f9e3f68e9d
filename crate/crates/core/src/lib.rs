//! Coarse-to-fine classification cascade for candidate-based lesion detection.
//!
//! The cascade has two tiers:
//!
//! 1. a parametric multiple-instance logistic model ([`mil`]) scores every
//!    candidate and prunes the ones that are clearly negative;
//! 2. the surviving, classification-critical candidates go through feature
//!    selection ([`mrmr`]), a class-regularized linear graph embedding
//!    ([`crge`], or the sparse [`spg`] baseline), per-class t-center
//!    clustering ([`templates`]) and soft kNN voting over the templates
//!    ([`voting`]).
//!
//! [`eval`] computes FROC curves with per-lesion sensitivity and
//! per-case false positives, and [`pipeline`] wires every stage together
//! behind versioned on-disk artifacts.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod crge;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod mil;
pub mod mrmr;
pub mod pipeline;
pub mod spg;
pub mod templates;
pub mod voting;

pub use error::{Error, Result};
