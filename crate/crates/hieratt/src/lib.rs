//! Explainable image captioning at desk scale.
//!
//! The pipeline pairs a caption generator (compact CNN encoder feeding a
//! causal 1-D convolution decoder with hierarchical attention gates) with
//! an explainer (region-word relevance scoring plus an interpretability
//! loss that feeds back into training). Everything runs on a small
//! from-scratch autodiff engine over a synthetic shape-scene dataset, with
//! BLEU/ROUGE-L/CIDEr evaluation and SVG visualization of the selected
//! region-word pairs.

pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod interp;
pub mod metrics;
pub mod render;
pub mod rng;
pub mod trainer;
pub mod rwa;
pub mod tensor;

pub use error::{Error, Result};
