pub mod archive;
pub mod bench;
pub mod canonical;
pub mod dataio;
pub mod error;
pub mod ica;
pub mod pipeline;
mod linalg;
pub mod sampler;
pub mod statnet;
pub mod trainer;

pub use error::{Error, Result};
