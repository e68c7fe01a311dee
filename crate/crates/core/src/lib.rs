pub mod attribution;
pub mod axioms;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod scale_space;

pub use error::{Error, Result};
