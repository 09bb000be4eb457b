//! Similarity-conditioned neural sound-effect synthesis.
//!
//! Clips are scored against class statistics in an embedding space,
//! a recurrent decoder maps frame features plus a similarity vector to
//! noise/transient synthesizer controls, and everything is trained by
//! reverse-mode differentiation through the synthesizer.

pub mod audio_io;
pub mod autodiff;
pub mod config;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod nn;
pub mod similarity;
pub mod synthesis;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
