pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
