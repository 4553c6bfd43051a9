pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod network;
pub mod pipeline;
pub mod training;

pub use error::{DigestError, Result};
