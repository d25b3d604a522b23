pub mod actuators;
pub mod closed_loop;
pub mod config;
pub mod discretization;
pub mod error;
pub mod experiments;
pub mod feedback;
pub mod learning;
pub mod network;
pub mod sparse;

pub use error::{Error, Result};
