//! Ginzburg-Landau vortex-state computation with localized orthogonal
//! decomposition (LOD) spaces.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod forms;
pub mod lod;
pub mod mesh;
pub mod minimize;
pub mod space;
pub mod sparse;
pub mod spectrum;

pub use error::{Error, Result};
