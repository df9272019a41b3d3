pub mod diffcore;
mod error;

pub use error::{Error, Result};
pub mod augment;
pub mod datamodel;
pub mod encoders;
pub mod evaluation;
pub mod losses;
pub mod retrieval;
pub mod synthbench;
pub mod training;
