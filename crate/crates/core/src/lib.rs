//! Brain tumor segmentation toolkit.
//!
//! Covers the whole path from BraTS-style NIfTI cases to challenge metrics:
//! preprocessing, a MedNeXt forward pass, sliding-window inference,
//! probability ensembling, threshold and component-size postprocessing,
//! Dice/HD95/lesion-wise evaluation, and a small verifiable training kit.

pub mod error;
pub mod volcore;
pub mod params;
pub mod mednext;
pub mod inference;
pub mod postprocess;
pub mod metrics;
pub mod preprocess;
pub mod volio;
pub mod trainkit;
pub mod checkpoint;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
