pub mod discrepancy;
pub mod engine;
pub mod error;
pub mod harness;
pub mod mixture;
pub mod schedule;

pub use error::{Error, Result};
