pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod mapper;
pub mod model;
pub mod moe;
pub mod nn;
pub mod tokenizer;
pub mod train;

pub use error::{CoreError, Result};
