//! Multi-view neural surface reconstruction with view-combination scoring.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod formats;
pub mod frustum;
pub mod geometry;
pub mod gradsuite;
pub mod model;
pub mod renderer;
pub mod similarity;
pub mod synthlab;
pub mod trainer;
pub mod vcscore;

pub use error::{ReconError, Result};
