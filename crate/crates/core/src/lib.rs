pub mod assignment;
pub mod autodiff;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod losses;
pub mod synthdata;

pub use error::{Error, Result};
