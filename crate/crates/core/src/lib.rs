pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod kfm;
pub mod knowledge;
pub mod numerics;
pub mod trainer;
pub mod transformer;

pub use error::{KalaError, Result};
