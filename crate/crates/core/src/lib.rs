pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod frames;
pub mod lighting;
pub mod mesh;
pub mod refine;
pub mod sampling;
pub mod sdf;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
