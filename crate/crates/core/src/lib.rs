pub mod alignment;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod llm_gen;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
