//! Hybrid attention-convolution segmentation network: transformer prior, U-Net residual,
//! additive fusion, the staged trainer and the weight container.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod lossop;
pub mod model;
pub mod params;
pub mod trainer;

pub use config::HacConfig;
pub use error::{NetError, Result};
pub use model::{forward, forward_recon, fuse, HacMaps};
pub use params::{Group, ParamStore};
