//! Frame loading shared by the subcommands.

use std::path::{Path, PathBuf};

use hacseg_core::manifest::{read_manifest, ManifestEntry};
use hacseg_core::raster::{extract_fov, load_image, load_mask};
use hacseg_core::synth::make_synthetic_dataset;
use hacseg_core::RasterImage;
use hacseg_net::trainer::Labeled;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;

fn is_manifest(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("csv" | "txt" | "lst")
    )
}

/// Entries of a manifest, or a one-entry list for a bare image path.
pub fn entries(cfg: &RunConfig, input: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    if !is_manifest(input) {
        return Ok(vec![ManifestEntry {
            image: input.to_path_buf(),
            mask: None,
        }]);
    }
    let list = read_manifest(input, cfg.data_root().as_deref())?;
    if list.is_empty() {
        return Err(CliError::data(format!("{}: manifest lists no frames", input.display())));
    }
    Ok(list)
}

/// A frame with its FOV extracted.
pub fn frame(cfg: &RunConfig, path: &Path) -> Result<RasterImage, CliError> {
    let img = load_image(path)?;
    let fov = extract_fov(&img, cfg.profile.fov_threshold);
    if fov.empty {
        return Err(CliError::data(format!("{}: no pixel above the FOV threshold", path.display())));
    }
    Ok(img.with_fov(fov.mask)?)
}

fn check_size(path: &Path, img: &RasterImage, size: usize) -> Result<(), CliError> {
    if img.dims() != (size, size) {
        let (w, h) = img.dims();
        return Err(CliError::data(format!(
            "{}: frame is {w}x{h}, model expects {size}x{size}",
            path.display()
        )));
    }
    Ok(())
}

pub fn frames(cfg: &RunConfig, list: &[ManifestEntry], size: usize) -> Result<Vec<RasterImage>, CliError> {
    list.par_iter()
        .map(|e| {
            let img = frame(cfg, &e.image)?;
            check_size(&e.image, &img, size)?;
            Ok(img)
        })
        .collect()
}

pub fn labeled(cfg: &RunConfig, list: &[ManifestEntry], size: usize) -> Result<Vec<Labeled>, CliError> {
    list.par_iter()
        .map(|e| {
            let mask_path = e
                .mask
                .as_ref()
                .ok_or_else(|| CliError::data(format!("{}: no annotation listed", e.image.display())))?;
            let image = frame(cfg, &e.image)?;
            check_size(&e.image, &image, size)?;
            let mask = load_mask(mask_path)?;
            image.fov().same_dims(&mask)?;
            Ok(Labeled { image, mask })
        })
        .collect()
}

/// Training source: a manifest path or a count of generated trees.
pub enum Source {
    Manifest(PathBuf),
    Synthetic(usize),
}

impl Source {
    pub fn resolve(input: Option<PathBuf>, manifest_key: &str, synthetic: usize) -> Result<Self, CliError> {
        if let Some(p) = input {
            return Ok(Source::Manifest(p));
        }
        if synthetic > 0 {
            return Ok(Source::Synthetic(synthetic));
        }
        if !manifest_key.is_empty() {
            return Ok(Source::Manifest(PathBuf::from(manifest_key)));
        }
        Err(CliError::config("no training data: pass --in, --synthetic or set the stage manifest"))
    }

    /// Labeled frames and, for manifest input, their image paths.
    pub fn load_labeled(
        &self,
        cfg: &RunConfig,
        size: usize,
        seed: u64,
    ) -> Result<(Vec<Labeled>, Option<Vec<PathBuf>>), CliError> {
        match self {
            Source::Synthetic(n) => Ok((
                make_synthetic_dataset(*n, size, seed).into_iter().map(Into::into).collect(),
                None,
            )),
            Source::Manifest(p) => {
                let list = entries(cfg, p)?;
                let frames = labeled(cfg, &list, size)?;
                Ok((frames, Some(list.into_iter().map(|e| e.image).collect())))
            }
        }
    }

    pub fn load_frames(
        &self,
        cfg: &RunConfig,
        size: usize,
        seed: u64,
    ) -> Result<(Vec<RasterImage>, Option<Vec<PathBuf>>), CliError> {
        match self {
            Source::Synthetic(n) => Ok((
                make_synthetic_dataset(*n, size, seed).into_iter().map(|s| s.image).collect(),
                None,
            )),
            Source::Manifest(p) => {
                let list = entries(cfg, p)?;
                let f = frames(cfg, &list, size)?;
                Ok((f, Some(list.into_iter().map(|e| e.image).collect())))
            }
        }
    }
}
