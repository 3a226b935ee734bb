//! Proposal-free temporal action detection on precomputed snippet features.
//!
//! The pipeline embeds each video's snippet features with a multi-scale
//! self-attentive encoder, predicts per-snippet class distributions alongside
//! a global segmentation mask per snippet, trains both heads jointly with a
//! mask-boundary / outer-inner-contrast / feature-consistency objective, and
//! decodes action segments from the masks with SoftNMS. Everything is f64,
//! seeded, and deterministic; training uses a small built-in reverse-mode
//! tape rather than an external framework.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod infer;
pub mod labels;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
