//! Reprogramming a frozen image-restoration network with wave-function
//! input and output transforms.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod degradations;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod image_io;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod output_transform;
pub mod tensor;
pub mod training;
pub mod wave_transforms;

pub use error::{Error, Result};
