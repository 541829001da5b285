pub mod analyze;
pub mod cli;
pub mod ctm;
pub mod data;
pub mod encoder;
pub mod error;
pub mod numkernel;
pub mod posenc;
pub mod train;

pub use error::{Error, Result};
