//! Building blocks for hybrid attention-convolution vessel segmentation of endoscopic frames:
//! raster I/O and FOV extraction, skeleton-based topology targets, the physics-aware
//! corruption engine, dataset quality profiling, and segmentation metrics and losses.

pub mod augment;
pub mod edt;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod morph;
pub mod profile;
pub mod raster;
pub mod skeleton;
pub mod synth;
pub mod targets;

pub use raster::{BinaryMask, ProbMap, RasterError, RasterImage};
pub use skeleton::{skeletonize, SkeletonGraph};
pub use targets::prune_targets;
