//! Teacher-guided binary segmentation: a frozen image encoder shapes a
//! compact student through edge-guided embedding alignment.
//!
//! Host-side arrays (`ImageBatch`, `MaskBatch`, `EdgeMap`) are NHWC; network
//! tensors are NCHW.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edge;
pub mod eg;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod synthetic;
pub mod trace;
pub mod train;
pub mod types;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use train::{evaluate, train, Framework, Trainer};
pub use types::{ImageBatch, MaskBatch, SegPrediction};
