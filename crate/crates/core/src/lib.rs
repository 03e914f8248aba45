pub mod error;
mod io_util;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod model;
pub mod pca;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod synth;
pub mod train;
