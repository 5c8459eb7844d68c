pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod losses;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod training;
pub mod wpt;

pub use error::{Error, Result};
