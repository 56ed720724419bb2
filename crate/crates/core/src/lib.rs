pub mod basis;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod monotone;
pub mod penalty;
pub mod refdist;
pub mod sampler;
pub mod simstudy;
pub mod synthetic;

pub use data::{Column, ColumnSpec, Dataset, Schema};
pub use error::{Error, Result};
pub use model::{build_design, Design, Model, ModelDesign, ModelSpec, ModelState, TermSpec};
pub use refdist::ReferenceDistribution;
