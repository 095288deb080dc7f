pub mod checkpoint;
pub mod cli;
pub mod diffcore;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod rendering;
pub mod scenes;
pub mod spiking;
pub mod trainer;

pub use error::{Error, Result};
