//! Pseudo referring-expression annotations from unlabeled images.
//!
//! The flow is: select masks ([`maskops`]), crop patches per mask, decode
//! several caption candidates per patch with distractor-calibrated sampling
//! ([`decoding`]), score each candidate for uniqueness, correctness and
//! distinctiveness ([`scoring`]), then keep candidates above a threshold
//! ([`pipeline`]). Model roles sit behind the traits in [`backends`];
//! [`synthworld`] provides deterministic reference implementations.

pub mod backends;
pub mod decoding;
pub mod error;
pub mod export;
pub mod maskops;
pub mod pipeline;
pub mod scoring;
pub mod synthworld;

pub use error::{Error, Result};

/// Floor applied to every image-text score so ratios stay finite.
pub const SCORE_FLOOR: f64 = 1e-6;
