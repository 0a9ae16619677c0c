//! Saliency-guided attention network for image-sentence matching, built on a
//! small f64 reverse-mode autograd.
//!
//! The crate covers the whole pipeline: a synthetic shapes corpus with exact
//! saliency masks ([`datasets`]), the network components ([`saliency`],
//! [`visual`], [`text`], [`sta`], assembled in [`model`]), the ranking
//! objective, two-stage training, retrieval metrics and a finite-difference
//! self-test ([`gradsuite`]).

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod objective;
pub mod params;
pub mod saliency;
pub mod sta;
pub mod tensor;
pub mod text;
pub mod training;
pub mod visual;

pub use error::{Result, SanError};
