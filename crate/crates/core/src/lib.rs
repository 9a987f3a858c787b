pub mod attribution;
pub mod benchmark;
pub mod data;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod granger;
pub mod model;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
