//! Category-conditioned prompting of a CLIP-style vision transformer for
//! fine-grained zero-shot sketch-based image retrieval.

pub mod backbone;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod graph;
pub mod image;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod patch_matching;
pub mod retrieval;
pub mod synth;
pub mod tensor_file;
pub mod text;
pub mod textual_prompting;
pub mod train;
pub mod visualize;
pub mod visual_prompting;

pub use error::{Error, Result};
