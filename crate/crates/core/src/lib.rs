//! Part-prototype cross-view geo-localization at desk scale.
//!
//! Procedural satellite/drone scene pairs feed a small shared encoder and
//! the prototype part head; training combines four loss groups with learned
//! log-variance weights, and evaluation is single-pass cosine retrieval.

pub mod audit;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod raster;
pub mod run;
pub mod scene;
pub mod train;
pub mod weather;

pub use error::{Result, SkyError};
