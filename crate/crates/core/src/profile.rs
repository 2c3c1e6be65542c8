//! Dataset quality profiling: class ratios, red intensity and contrast, colour separation,
//! tortuosity, branching density, illumination variation and vignetting.
//!
//! Intensities are reported on the 8-bit scale (0-255). Luminance is the unweighted mean of
//! R, G and B. Vessel and background statistics are restricted to the FOV.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::ManifestEntry;
use crate::raster::{self, BinaryMask, RasterImage};
use crate::skeleton::{chain_length, skeletonize, Pixel, SkeletonGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{metric} is undefined: {reason}")]
pub struct MetricError {
    pub metric: &'static str,
    pub reason: String,
}

fn undefined(metric: &'static str, reason: impl Into<String>) -> MetricError {
    MetricError {
        metric,
        reason: reason.into(),
    }
}

pub type MetricResult = Result<f64, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Centre region radius as a fraction of the FOV radius.
    pub center_frac: f64,
    /// Periphery starts beyond this fraction of the FOV radius.
    pub periphery_frac: f64,
    pub fov_threshold: f32,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            center_frac: 0.4,
            periphery_frac: 0.75,
            fov_threshold: raster::DEFAULT_FOV_THRESHOLD,
        }
    }
}

fn region_mean_rgb(img: &RasterImage, region: &BinaryMask) -> Option<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (x, y) in region.iter_set() {
        let p = img.pixel(x, y);
        for c in 0..3 {
            sum[c] += f64::from(p[c]);
        }
        n += 1;
    }
    (n > 0).then(|| sum.map(|s| 255.0 * s / n as f64))
}

/// Vessel pixels inside the FOV and the remaining FOV background.
fn partition(img: &RasterImage, vessels: &BinaryMask) -> (BinaryMask, BinaryMask) {
    let v = vessels.and(img.fov());
    let bg = img.fov().and_not(&v);
    (v, bg)
}

pub fn rcc_from_means(r_v: f64, r_bg: f64) -> MetricResult {
    if r_bg == 0.0 {
        return Err(undefined("RCC", "background red intensity is zero"));
    }
    Ok((r_v - r_bg) / r_bg)
}

/// Relative red-channel contrast of vessels against FOV background.
pub fn red_channel_contrast(img: &RasterImage, vessels: &BinaryMask) -> MetricResult {
    let (v, bg) = partition(img, vessels);
    let mv = region_mean_rgb(img, &v).ok_or_else(|| undefined("RCC", "no vessel pixels"))?;
    let mb = region_mean_rgb(img, &bg).ok_or_else(|| undefined("RCC", "no background pixels"))?;
    rcc_from_means(mv[0], mb[0])
}

/// Euclidean distance between mean vessel and mean background colour.
pub fn color_separation_index(img: &RasterImage, vessels: &BinaryMask) -> MetricResult {
    let (v, bg) = partition(img, vessels);
    let mv = region_mean_rgb(img, &v).ok_or_else(|| undefined("CSI", "no vessel pixels"))?;
    let mb = region_mean_rgb(img, &bg).ok_or_else(|| undefined("CSI", "no background pixels"))?;
    Ok((0..3).map(|c| (mv[c] - mb[c]).powi(2)).sum::<f64>().sqrt())
}

/// Path length over endpoint distance.
pub fn tortuosity_index(path: &[Pixel]) -> MetricResult {
    if path.len() < 2 {
        return Err(undefined("TI", "path has fewer than 2 pixels"));
    }
    let (a, b) = (path[0], path[path.len() - 1]);
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    let d = (dx * dx + dy * dy).sqrt();
    if d == 0.0 {
        return Err(undefined("TI", "closed path"));
    }
    Ok(chain_length(path) / d)
}

/// Per-branch tortuosity of a skeleton and the number of excluded closed loops.
pub fn branch_tortuosities(skel: &SkeletonGraph) -> (Vec<f64>, usize) {
    let mut out = Vec::new();
    let mut loops = 0;
    for b in &skel.branches {
        match tortuosity_index(&b.pixels) {
            Ok(t) => out.push(t),
            Err(_) if b.closed || b.pixels.len() >= 2 => loops += 1,
            Err(_) => {}
        }
    }
    (out, loops)
}

/// Branch points per 100 px of skeleton. A cluster of adjacent degree >= 3 pixels counts as
/// one branch point; length is the skeleton pixel count.
pub fn branching_density(skel: &SkeletonGraph) -> MetricResult {
    let len = skel.pixel_count();
    if len == 0 {
        return Err(undefined("BD", "empty skeleton"));
    }
    Ok(100.0 * skel.junction_count() as f64 / len as f64)
}

fn population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn bounding_box(mask: &BinaryMask) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (x, y) in mask.iter_set() {
        bb = Some(match bb {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    bb
}

/// Block coefficient of variation over the whole FOV.
pub fn coefficient_of_variation(img: &RasterImage) -> MetricResult {
    coefficient_of_variation_in(img, img.fov())
}

/// Block coefficient of variation using only `region` pixels. The 3x3 grid spans the FOV
/// bounding box; blocks without region pixels are skipped.
pub fn coefficient_of_variation_in(img: &RasterImage, region: &BinaryMask) -> MetricResult {
    let (x0, y0, x1, y1) = bounding_box(img.fov()).ok_or_else(|| undefined("CV", "empty FOV"))?;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut sums = [0.0f64; 9];
    let mut counts = [0usize; 9];
    for (x, y) in region.and(img.fov()).iter_set() {
        let bx = ((x - x0) * 3 / bw).min(2);
        let by = ((y - y0) * 3 / bh).min(2);
        sums[by * 3 + bx] += f64::from(img.luma(x, y));
        counts[by * 3 + bx] += 1;
    }
    let means: Vec<f64> = (0..9)
        .filter(|&k| counts[k] > 0)
        .map(|k| sums[k] / counts[k] as f64)
        .collect();
    if means.len() < 2 {
        return Err(undefined("CV", "fewer than 2 populated grid blocks"));
    }
    let (mean, std) = population_std(&means);
    if mean == 0.0 {
        return Err(undefined("CV", "zero mean block luminance"));
    }
    Ok(std / mean)
}

pub fn vignetting_index(img: &RasterImage, opts: &ProfileOptions) -> MetricResult {
    vignetting_index_in(img, img.fov(), opts)
}

/// Centre-to-periphery luminance drop using only `region` pixels; centre and radius come
/// from the FOV.
pub fn vignetting_index_in(
    img: &RasterImage,
    region: &BinaryMask,
    opts: &ProfileOptions,
) -> MetricResult {
    let fov = img.fov();
    let n = fov.count();
    if n == 0 {
        return Err(undefined("VI", "empty FOV"));
    }
    let (sx, sy) = fov
        .iter_set()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x as f64, b + y as f64));
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let dist = |x: usize, y: usize| ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
    let r = fov.iter_set().map(|(x, y)| dist(x, y)).fold(0.0, f64::max);
    let (mut c_sum, mut c_n, mut p_sum, mut p_n) = (0.0, 0usize, 0.0, 0usize);
    for (x, y) in region.and(fov).iter_set() {
        let d = dist(x, y);
        if d <= opts.center_frac * r {
            c_sum += f64::from(img.luma(x, y));
            c_n += 1;
        } else if d > opts.periphery_frac * r {
            p_sum += f64::from(img.luma(x, y));
            p_n += 1;
        }
    }
    if c_n == 0 || p_n == 0 {
        return Err(undefined("VI", "empty centre or periphery region"));
    }
    let (ic, ip) = (c_sum / c_n as f64, p_sum / p_n as f64);
    if ic == 0.0 {
        return Err(undefined("VI", "zero centre luminance"));
    }
    Ok((ic - ip) / ic)
}

/// Per-frame statistics. Vessel-dependent fields are `None` without an annotation or when
/// undefined for the frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameProfile {
    pub fov_ratio: f64,
    pub vessel_ratio: Option<f64>,
    pub bg_ratio: Option<f64>,
    pub ri_overall: Option<f64>,
    pub ri_vessel: Option<f64>,
    pub ri_bg: Option<f64>,
    pub rcc: Option<f64>,
    pub csi: Option<f64>,
    /// Mean branch tortuosity of this frame.
    pub ti: Option<f64>,
    pub ti_branch_count: usize,
    pub closed_loops: usize,
    pub bd: Option<f64>,
    pub cv: Option<f64>,
    pub cv_vessel: Option<f64>,
    pub cv_bg: Option<f64>,
    pub vi: Option<f64>,
    pub vi_vessel: Option<f64>,
    pub vi_bg: Option<f64>,
    #[serde(skip)]
    pub ti_branches: Vec<f64>,
}

impl FrameProfile {
    /// Scalar metrics by name, in report order.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("fov_ratio", Some(self.fov_ratio)),
            ("vessel_ratio", self.vessel_ratio),
            ("bg_ratio", self.bg_ratio),
            ("ri_overall", self.ri_overall),
            ("ri_vessel", self.ri_vessel),
            ("ri_bg", self.ri_bg),
            ("rcc", self.rcc),
            ("csi", self.csi),
            ("ti", self.ti),
            ("bd", self.bd),
            ("cv", self.cv),
            ("cv_vessel", self.cv_vessel),
            ("cv_bg", self.cv_bg),
            ("vi", self.vi),
            ("vi_vessel", self.vi_vessel),
            ("vi_bg", self.vi_bg),
        ]
    }
}

/// Profile one frame whose FOV is already set.
pub fn profile_frame(
    img: &RasterImage,
    vessels: Option<&BinaryMask>,
    opts: &ProfileOptions,
) -> FrameProfile {
    let total = (img.width() * img.height()) as f64;
    let fov = img.fov();
    let mut p = FrameProfile {
        fov_ratio: 100.0 * fov.count() as f64 / total,
        ri_overall: region_mean_rgb(img, fov).map(|m| m[0]),
        cv: coefficient_of_variation(img).ok(),
        vi: vignetting_index(img, opts).ok(),
        ..Default::default()
    };
    let Some(vessels) = vessels else {
        return p;
    };
    let (v, bg) = partition(img, vessels);
    p.vessel_ratio = Some(100.0 * v.count() as f64 / total);
    p.bg_ratio = Some(100.0 * bg.count() as f64 / total);
    p.ri_vessel = region_mean_rgb(img, &v).map(|m| m[0]);
    p.ri_bg = region_mean_rgb(img, &bg).map(|m| m[0]);
    p.rcc = red_channel_contrast(img, vessels).ok();
    p.csi = color_separation_index(img, vessels).ok();
    p.cv_vessel = coefficient_of_variation_in(img, &v).ok();
    p.cv_bg = coefficient_of_variation_in(img, &bg).ok();
    p.vi_vessel = vignetting_index_in(img, &v, opts).ok();
    p.vi_bg = vignetting_index_in(img, &bg, opts).ok();

    let skel = skeletonize(&v);
    let (tis, loops) = branch_tortuosities(&skel);
    p.ti = (!tis.is_empty()).then(|| tis.iter().sum::<f64>() / tis.len() as f64);
    p.ti_branch_count = tis.len();
    p.closed_loops = loops;
    p.ti_branches = tis;
    p.bd = branching_density(&skel).ok();
    p
}

/// Load, extract the FOV and profile one manifest entry.
pub fn profile_entry(entry: &ManifestEntry, opts: &ProfileOptions) -> Result<FrameProfile, String> {
    let mut img = raster::load_image(&entry.image).map_err(|e| e.to_string())?;
    let fov = raster::extract_fov(&img, opts.fov_threshold);
    if fov.empty {
        return Err(format!("{}: empty field of view", entry.image.display()));
    }
    img.set_fov(fov.mask).map_err(|e| e.to_string())?;
    let mask = match &entry.mask {
        Some(m) => {
            let mask = raster::load_mask(m).map_err(|e| e.to_string())?;
            mask.same_dims(img.fov()).map_err(|e| e.to_string())?;
            Some(mask)
        }
        None => None,
    };
    Ok(profile_frame(&img, mask.as_ref(), opts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub profile: Option<FrameProfile>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Frames on which the metric was defined.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub luminance: String,
    pub intensity_scale: String,
    pub options: ProfileOptions,
    pub per_frame: Vec<FrameRecord>,
    pub aggregate: BTreeMap<String, Aggregate>,
    /// Mean over all branches pooled across frames.
    pub ti_branch_mean: Option<f64>,
    /// Mean of per-frame branch means.
    pub ti_frame_mean: Option<f64>,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let (mean, std) = population_std(values);
    Some(Aggregate {
        mean,
        std,
        count: values.len(),
    })
}

/// Reduce per-frame records in order; frame evaluation order does not matter.
pub fn summarize(per_frame: Vec<FrameRecord>, opts: &ProfileOptions) -> DatasetReport {
    let profiles: Vec<&FrameProfile> = per_frame.iter().filter_map(|r| r.profile.as_ref()).collect();
    let mut agg = BTreeMap::new();
    if let Some(first) = profiles.first() {
        for (k, (name, _)) in first.metrics().into_iter().enumerate() {
            let vals: Vec<f64> = profiles.iter().filter_map(|p| p.metrics()[k].1).collect();
            if let Some(a) = aggregate(&vals) {
                agg.insert(name.to_string(), a);
            }
        }
    }
    let pooled: Vec<f64> = profiles.iter().flat_map(|p| p.ti_branches.iter().copied()).collect();
    let ti_branch_mean = aggregate(&pooled).map(|a| a.mean);
    let ti_frame_mean = agg.get("ti").map(|a| a.mean);
    DatasetReport {
        luminance: "mean(R,G,B)".into(),
        intensity_scale: "0-255".into(),
        options: *opts,
        per_frame,
        aggregate: agg,
        ti_branch_mean,
        ti_frame_mean,
    }
}

/// Profile every manifest entry in parallel. Per-frame failures are recorded, not fatal.
pub fn profile_dataset(entries: &[ManifestEntry], opts: &ProfileOptions) -> DatasetReport {
    let per_frame: Vec<FrameRecord> = entries
        .par_iter()
        .map(|e| {
            let (profile, error) = match profile_entry(e, opts) {
                Ok(p) => (Some(p), None),
                Err(err) => (None, Some(err)),
            };
            FrameRecord {
                image: e.image.clone(),
                mask: e.mask.clone(),
                profile,
                error,
            }
        })
        .collect();
    summarize(per_frame, opts)
}

impl DatasetReport {
    /// Overall / vessel / background rows with mean and std per column; blank where the
    /// column does not apply.
    pub fn to_table_csv(&self) -> String {
        const COLS: [&str; 8] = ["ratio", "ri", "rcc", "csi", "ti", "bd", "cv", "vi"];
        let rows: [(&str, [Option<&str>; 8]); 3] = [
            (
                "overall",
                [Some("fov_ratio"), Some("ri_overall"), Some("rcc"), Some("csi"), None, None, Some("cv"), Some("vi")],
            ),
            (
                "vessel",
                [Some("vessel_ratio"), Some("ri_vessel"), None, None, Some("ti"), Some("bd"), Some("cv_vessel"), Some("vi_vessel")],
            ),
            (
                "background",
                [Some("bg_ratio"), Some("ri_bg"), None, None, None, None, Some("cv_bg"), Some("vi_bg")],
            ),
        ];
        let mut out = String::from("row");
        for c in COLS {
            out.push_str(&format!(",{c}_mean,{c}_std"));
        }
        out.push('\n');
        for (row, keys) in rows {
            out.push_str(row);
            for key in keys {
                match key.and_then(|k| self.aggregate.get(k)) {
                    Some(a) => out.push_str(&format!(",{:.6},{:.6}", a.mean, a.std)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}
