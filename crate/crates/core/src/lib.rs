pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod foundation;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
