//! Dense anomaly detection for semantic segmentation.
//!
//! The library covers synthetic outlier compositing onto inlier training
//! images, the likelihood-ratio training objective, per-pixel anomaly
//! scores, exact and streaming dense metrics, and a small reference model
//! used to exercise all of the above end to end.

pub mod cli;
pub mod compositor;
pub mod error;
pub mod imageops;
pub mod io;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod negatives;
pub mod scoring;
pub mod shapes;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_ID, OUTLIER_ID};
