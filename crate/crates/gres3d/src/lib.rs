//! Generalized 3D referring expression segmentation on synthetic desk-scale
//! scenes: a query-based mask decoder over superpoints with text-driven
//! sparse query selection, trained end to end with decoupled per-query
//! losses and evaluated under the generalized zero/single/multi-target
//! protocol.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
