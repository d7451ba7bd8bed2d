//! Desk-scale laboratory for few-shot 3D point-cloud semantic segmentation
//! by correlation optimization.
//!
//! The crate covers the benchmark plumbing (voxel and block preprocessing,
//! biased vs. uniform input sampling with a leakage audit, N-way K-shot
//! episodes, mIoU) and the model itself: multi-prototype correlation
//! tensors refined by stacked linear-attention layers, with background
//! calibration from momentum-updated base-class prototypes. All model math
//! runs on the small tensor kernel in [`tensorops`].

pub mod attention;
pub mod episodes;
pub mod error;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensorops;

pub use error::{Error, Result};
