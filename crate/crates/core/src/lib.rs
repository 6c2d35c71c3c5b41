//! Interactive refinement of dense segmentation predictions from click
//! annotations, with uncertainty-driven guidance of where to click next.

pub mod acquisition;
pub mod agent;
pub mod annotation;
pub mod checkpoint;
pub mod disca;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod prediction;
pub mod query;
pub mod service;
pub mod raster;
pub mod spatial;
pub mod stats;
pub mod tiling;
pub mod toy;

pub use error::{Error, Result};
