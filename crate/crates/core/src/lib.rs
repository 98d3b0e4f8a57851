pub mod checkpoint;
pub mod config;
pub mod context;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod featbin;
pub mod featext;
pub mod lmtts;
pub mod nn;
pub mod pipeline;
pub mod styles;
pub mod vq;

pub use error::{Error, Result};
