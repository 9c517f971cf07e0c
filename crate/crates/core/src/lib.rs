pub mod cli;
pub mod datagen;
pub mod error;
pub mod model;
pub mod motion;
pub mod nn;
pub mod refine;
pub mod resize;
pub mod tuner;

pub use error::{RcfError, Result};
