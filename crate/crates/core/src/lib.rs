pub mod encoder;
pub mod error;
pub mod eval;
pub mod gaze;
pub mod harness;
pub mod numerics;
pub mod parallel;
pub mod ranker;
pub mod tokenizer;

pub use error::{Error, Result};
