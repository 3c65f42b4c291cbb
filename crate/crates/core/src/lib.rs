//! Clothes landmark detection with a shared ("aggregated") landmark space:
//! one heatmap head serves every garment category, then per-category
//! finetuning specialises copies of it.
//!
//! The modules follow the data flow: [`schema`] defines the landmark spaces,
//! [`dataset`] loads or synthesises annotated images, [`heatmap`] encodes
//! targets and decodes predictions, [`model`] and [`train`] fit the
//! regressor, [`pipeline`] runs inference and [`eval`] scores it.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod io;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod schema;
pub mod train;

pub use error::{Error, Result};
