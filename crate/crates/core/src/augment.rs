//! Seeded corruption engine for reconstruction pretraining: specular bubbles, gain and
//! vignetting, and spatially varying local contrast loss. All three only touch FOV pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, RasterImage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("corruption spec: {0}")]
pub struct SpecError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Apply all three augmentations in order.
    #[default]
    Joint,
    /// Apply one augmentation drawn uniformly per call.
    Single,
}

impl std::str::FromStr for CorruptionMode {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Self::Joint),
            "single" => Ok(Self::Single),
            other => Err(SpecError(format!("unknown mode {other:?} (joint|single)"))),
        }
    }
}

/// Sampling ranges of the corruption engine. Intervals are closed `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub bubble_count: (u32, u32),
    /// Semi-axis range in px.
    pub bubble_axes: (f64, f64),
    pub vignette_strength: (f64, f64),
    pub gain: (f64, f64),
    pub contrast_strength: (f64, f64),
    /// Box-filter window in px (odd).
    pub contrast_patch: usize,
    pub seed: u64,
    pub mode: CorruptionMode,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            bubble_count: (2, 6),
            bubble_axes: (4.0, 24.0),
            vignette_strength: (0.0, 0.45),
            gain: (0.7, 1.3),
            contrast_strength: (0.1, 0.4),
            contrast_patch: 9,
            seed: 42,
            mode: CorruptionMode::Joint,
        }
    }
}

impl CorruptionSpec {
    /// Every augmentation degenerate at its neutral value.
    pub fn identity() -> Self {
        Self {
            bubble_count: (0, 0),
            vignette_strength: (0.0, 0.0),
            gain: (1.0, 1.0),
            contrast_strength: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let check = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min || hi > max {
                Err(SpecError(format!("{name} range [{lo}, {hi}] must satisfy {min} <= low <= high <= {max}")))
            } else {
                Ok(())
            }
        };
        if self.bubble_count.0 > self.bubble_count.1 {
            return Err(SpecError("bubble_count low exceeds high".into()));
        }
        check("bubble_axes", self.bubble_axes, 0.5, f64::MAX)?;
        check("vignette_strength", self.vignette_strength, 0.0, 1.0)?;
        check("gain", self.gain, 0.0, f64::MAX)?;
        check("contrast_strength", self.contrast_strength, 0.0, 1.0)?;
        if self.contrast_patch == 0 || self.contrast_patch % 2 == 0 {
            return Err(SpecError(format!("contrast_patch {} must be odd", self.contrast_patch)));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Orientation of the `a` axis in radians.
    pub theta: f64,
}

impl Bubble {
    /// Normalised elliptical radius of (x, y); inside when <= 1.
    pub fn rho(&self, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    pub fn mask(&self, w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| self.rho(x, y) <= 1.0)
    }
}

const RIM_START: f64 = 0.75;
const RIM_ALPHA: f32 = 0.85;
const INTERIOR_ALPHA: f32 = 0.3;
const INTERIOR_TINT: f32 = 0.95;

pub fn sample_bubbles(img: &RasterImage, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Vec<Bubble> {
    let fov: Vec<(usize, usize)> = img.fov().iter_set().collect();
    if fov.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = spec.bubble_count;
    let n = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    (0..n)
        .map(|_| {
            let (x, y) = fov[rng.random_range(0..fov.len())];
            Bubble {
                cx: x as f64,
                cy: y as f64,
                a: draw(rng, spec.bubble_axes),
                b: draw(rng, spec.bubble_axes),
                theta: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect()
}

/// Composite bubbles: bright specular rim, semi-transparent lighter interior.
pub fn apply_bubbles(img: &RasterImage, bubbles: &[Bubble]) -> RasterImage {
    let mut out = img.clone();
    let (w, h) = img.dims();
    for b in bubbles {
        let r = b.a.max(b.b).ceil() as i64 + 1;
        let (x0, x1) = ((b.cx as i64 - r).max(0), (b.cx as i64 + r).min(w as i64 - 1));
        let (y0, y1) = ((b.cy as i64 - r).max(0), (b.cy as i64 + r).min(h as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (x, y) = (x as usize, y as usize);
                if !img.fov().get(x, y) {
                    continue;
                }
                let rho = b.rho(x, y);
                if rho > 1.0 {
                    continue;
                }
                let (alpha, target) = if rho > RIM_START {
                    (RIM_ALPHA, 1.0)
                } else {
                    (INTERIOR_ALPHA, INTERIOR_TINT)
                };
                let p = out.pixel(x, y);
                out.set_pixel(x, y, p.map(|v| (1.0 - alpha) * v + alpha * target));
            }
        }
    }
    out
}

pub fn add_bubbles(img: &RasterImage, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> RasterImage {
    let bubbles = sample_bubbles(img, spec, rng);
    apply_bubbles(img, &bubbles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricDraw {
    pub gain: f64,
    pub vignette: f64,
}

pub fn sample_photometric(spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> PhotometricDraw {
    PhotometricDraw {
        gain: draw(rng, spec.gain),
        vignette: draw(rng, spec.vignette_strength),
    }
}

/// FOV centroid and the largest centroid-to-FOV distance.
fn fov_geometry(fov: &BinaryMask) -> Option<(f64, f64, f64)> {
    let n = fov.count();
    if n == 0 {
        return None;
    }
    let (sx, sy) = fov
        .iter_set()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x as f64, b + y as f64));
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let r = fov
        .iter_set()
        .map(|(x, y)| (x as f64 - cx).hypot(y as f64 - cy))
        .fold(0.0, f64::max);
    Some((cx, cy, r))
}

/// Multiply FOV pixels by `gain * (1 - v (r/R)^2)` around the FOV centroid, then clamp.
pub fn apply_photometric(img: &RasterImage, d: PhotometricDraw) -> RasterImage {
    let Some((cx, cy, r_max)) = fov_geometry(img.fov()) else {
        return img.clone();
    };
    let w = img.width();
    let fov = img.fov();
    img.map_data(|i, v| {
        let px = i / 3;
        let (x, y) = (px % w, px / w);
        if !fov.get(x, y) {
            return v;
        }
        let rr = if r_max > 0.0 {
            (x as f64 - cx).hypot(y as f64 - cy) / r_max
        } else {
            0.0
        };
        let field = (1.0 - d.vignette * rr * rr).max(0.0);
        (f64::from(v) * d.gain * field) as f32
    })
}

pub fn photometric_jitter(img: &RasterImage, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> RasterImage {
    apply_photometric(img, sample_photometric(spec, rng))
}

/// Coarse strength grid, bilinearly upsampled to a smooth per-pixel map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastDraw {
    pub grid: usize,
    pub strengths: Vec<f64>,
}

const CONTRAST_GRID: usize = 4;

pub fn sample_contrast(spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> ContrastDraw {
    ContrastDraw {
        grid: CONTRAST_GRID,
        strengths: (0..CONTRAST_GRID * CONTRAST_GRID)
            .map(|_| draw(rng, spec.contrast_strength))
            .collect(),
    }
}

impl ContrastDraw {
    fn at(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let g = self.grid;
        let fx = if w > 1 { x as f64 / (w - 1) as f64 * (g - 1) as f64 } else { 0.0 };
        let fy = if h > 1 { y as f64 / (h - 1) as f64 * (g - 1) as f64 } else { 0.0 };
        let (x0, y0) = ((fx.floor() as usize).min(g - 1), (fy.floor() as usize).min(g - 1));
        let (x1, y1) = ((x0 + 1).min(g - 1), (y0 + 1).min(g - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let s = |i: usize, j: usize| self.strengths[j * g + i];
        let top = s(x0, y0) * (1.0 - tx) + s(x1, y0) * tx;
        let bot = s(x0, y1) * (1.0 - tx) + s(x1, y1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Box mean over FOV pixels in a `window` x `window` neighbourhood, per channel.
pub fn fov_box_mean(img: &RasterImage, window: usize) -> Vec<f64> {
    let (w, h) = img.dims();
    let fov = img.fov();
    // Summed-area tables of FOV-weighted intensities (3 channels) and FOV counts.
    let stride = w + 1;
    let mut sat = vec![[0.0f64; 4]; stride * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let mut cell = [0.0; 4];
            if fov.get(x, y) {
                let p = img.pixel(x, y);
                cell = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2]), 1.0];
            }
            for k in 0..4 {
                sat[(y + 1) * stride + x + 1][k] = cell[k] + sat[y * stride + x + 1][k]
                    + sat[(y + 1) * stride + x][k]
                    - sat[y * stride + x][k];
            }
        }
    }
    let r = window / 2;
    let mut out = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(r), (x + r + 1).min(w));
            let (ya, yb) = (y.saturating_sub(r), (y + r + 1).min(h));
            let rect = |k: usize| {
                sat[yb * stride + xb][k] - sat[ya * stride + xb][k] - sat[yb * stride + xa][k]
                    + sat[ya * stride + xa][k]
            };
            let n = rect(3);
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = if n > 0.0 { rect(c) / n } else { 0.0 };
            }
        }
    }
    out
}

/// Blend FOV pixels toward their local box mean with the drawn strength map.
pub fn apply_contrast(img: &RasterImage, window: usize, d: &ContrastDraw) -> RasterImage {
    if d.strengths.iter().all(|&s| s == 0.0) {
        return img.clone();
    }
    let (w, h) = img.dims();
    let blur = fov_box_mean(img, window);
    let fov = img.fov();
    img.map_data(|i, v| {
        let px = i / 3;
        let (x, y) = (px % w, px / w);
        if !fov.get(x, y) {
            return v;
        }
        let s = d.at(x, y, w, h);
        ((1.0 - s) * f64::from(v) + s * blur[i]) as f32
    })
}

pub fn reduce_local_contrast(img: &RasterImage, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> RasterImage {
    apply_contrast(img, spec.contrast_patch, &sample_contrast(spec, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Bubbles,
    Photometric,
    Contrast,
}

/// Everything sampled by one `corrupt` call; `replay` reproduces the output from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub mode: CorruptionMode,
    pub applied: Vec<Augmentation>,
    pub bubbles: Vec<Bubble>,
    pub photometric: PhotometricDraw,
    pub contrast: ContrastDraw,
    pub contrast_patch: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Corrupt `img` in the order bubbles, photometric, contrast, each from its own seeded stream.
pub fn corrupt(img: &RasterImage, spec: &CorruptionSpec) -> (RasterImage, Provenance) {
    let applied = match spec.mode {
        CorruptionMode::Joint => vec![Augmentation::Bubbles, Augmentation::Photometric, Augmentation::Contrast],
        CorruptionMode::Single => {
            let all = [Augmentation::Bubbles, Augmentation::Photometric, Augmentation::Contrast];
            vec![all[stream(spec.seed, 0).random_range(0..3)]]
        }
    };
    let bubbles = sample_bubbles(img, spec, &mut stream(spec.seed, 1));
    let photometric = sample_photometric(spec, &mut stream(spec.seed, 2));
    let contrast = sample_contrast(spec, &mut stream(spec.seed, 3));
    let prov = Provenance {
        seed: spec.seed,
        mode: spec.mode,
        applied,
        bubbles,
        photometric,
        contrast,
        contrast_patch: spec.contrast_patch,
    };
    (replay(img, &prov), prov)
}

pub fn replay(img: &RasterImage, prov: &Provenance) -> RasterImage {
    let mut out = img.clone();
    for a in &prov.applied {
        out = match a {
            Augmentation::Bubbles => apply_bubbles(&out, &prov.bubbles),
            Augmentation::Photometric => apply_photometric(&out, prov.photometric),
            Augmentation::Contrast => apply_contrast(&out, prov.contrast_patch, &prov.contrast),
        };
    }
    out
}

/// Order-independent per-frame seed (SplitMix64 finaliser over seed and index).
pub fn frame_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, |x, y| {
            let v = 0.3 + 0.4 * (((x * 13 + y * 7) % 17) as f32 / 17.0);
            [v, v * 0.8, v * 0.6]
        })
    }

    fn disk_fov(w: usize, h: usize, r: f64) -> BinaryMask {
        let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
        BinaryMask::from_fn(w, h, |x, y| (x as f64 - cx).hypot(y as f64 - cy) <= r)
    }

    fn diff_mask(a: &RasterImage, b: &RasterImage) -> BinaryMask {
        let (w, h) = a.dims();
        BinaryMask::from_fn(w, h, |x, y| a.pixel(x, y) != b.pixel(x, y))
    }

    #[test]
    fn zero_bubbles_is_identity() {
        let img = textured(32, 32);
        let spec = CorruptionSpec { bubble_count: (0, 0), ..Default::default() };
        assert_eq!(add_bubbles(&img, &spec, &mut stream(1, 1)), img);
    }

    #[test]
    fn three_bubbles_change_exactly_their_ellipses() {
        let img = textured(96, 96);
        let spec = CorruptionSpec { bubble_count: (3, 3), ..Default::default() };
        let bubbles = sample_bubbles(&img, &spec, &mut stream(9, 1));
        assert_eq!(bubbles.len(), 3);
        let out = apply_bubbles(&img, &bubbles);
        let mut union = BinaryMask::new(96, 96);
        for b in &bubbles {
            union = BinaryMask::from_fn(96, 96, |x, y| union.get(x, y) || b.rho(x, y) <= 1.0);
        }
        assert_eq!(diff_mask(&img, &out), union);
        assert_eq!(add_bubbles(&img, &spec, &mut stream(9, 1)), out);
    }

    #[test]
    fn bubbles_stay_inside_fov() {
        let img = textured(64, 64).with_fov(disk_fov(64, 64, 20.0)).unwrap();
        let spec = CorruptionSpec { bubble_count: (6, 6), bubble_axes: (15.0, 24.0), ..Default::default() };
        let out = add_bubbles(&img, &spec, &mut stream(3, 1));
        let d = diff_mask(&img, &out);
        assert!(d.count() > 0);
        assert!(d.is_subset_of(img.fov()));
    }

    #[test]
    fn photometric_closed_forms() {
        let img = RasterImage::filled(41, 41, [0.6, 0.6, 0.6]).with_fov(disk_fov(41, 41, 20.0)).unwrap();
        let id = apply_photometric(&img, PhotometricDraw { gain: 1.0, vignette: 0.0 });
        assert_eq!(id, img);
        let out = apply_photometric(&img, PhotometricDraw { gain: 1.0, vignette: 0.5 });
        // Centroid of the symmetric disk is its centre pixel (20,20); R is attained at (20,0).
        assert!((out.pixel(20, 20)[0] - 0.6).abs() < 1e-6);
        assert!((out.pixel(20, 0)[0] - 0.3).abs() < 1e-6);
        let sat = apply_photometric(&img, PhotometricDraw { gain: 2.0, vignette: 0.0 });
        for (x, y) in img.fov().iter_set() {
            assert_eq!(sat.pixel(x, y), [1.0; 3]);
        }
    }

    #[test]
    fn contrast_identity_and_fixed_point() {
        let img = textured(32, 32);
        let zero = ContrastDraw { grid: 4, strengths: vec![0.0; 16] };
        assert_eq!(apply_contrast(&img, 9, &zero), img);
        let flat = RasterImage::filled(32, 32, [0.4, 0.5, 0.6]);
        let full = ContrastDraw { grid: 4, strengths: vec![0.7; 16] };
        let out = apply_contrast(&flat, 9, &full);
        for (a, b) in out.data().iter().zip(flat.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn line_amplitude_drops_by_box_factor() {
        let img = RasterImage::from_fn(31, 31, |x, _| if x == 15 { [1.0; 3] } else { [0.0; 3] });
        let full = ContrastDraw { grid: 4, strengths: vec![1.0; 16] };
        let out = apply_contrast(&img, 9, &full);
        assert!((out.pixel(15, 15)[0] - 1.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn corrupt_is_deterministic_and_replayable() {
        let img = textured(64, 64).with_fov(disk_fov(64, 64, 28.0)).unwrap();
        let spec = CorruptionSpec::default();
        let (a, prov) = corrupt(&img, &spec);
        let (b, _) = corrupt(&img, &spec);
        assert_eq!(a, b);
        assert_eq!(replay(&img, &prov), a);
        let json = serde_json::to_string(&prov).unwrap();
        let back: Provenance = serde_json::from_str(&json).unwrap();
        assert_eq!(replay(&img, &back), a);
        let mean_abs: f32 = a.data().iter().zip(img.data()).map(|(x, y)| (x - y).abs()).sum::<f32>()
            / a.data().len() as f32;
        assert!(mean_abs > 0.0);
        assert!(diff_mask(&img, &a).is_subset_of(img.fov()));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (same, _) = corrupt(&img, &CorruptionSpec::identity());
        assert_eq!(same, img);
    }

    #[test]
    fn single_mode_applies_one_family() {
        let img = textured(32, 32);
        for seed in 0..20 {
            let spec = CorruptionSpec { mode: CorruptionMode::Single, seed, ..Default::default() };
            let (out, prov) = corrupt(&img, &spec);
            assert_eq!(prov.applied.len(), 1);
            assert_eq!(replay(&img, &prov), out);
        }
    }

    #[test]
    fn vignette_mse_is_monotone() {
        let img = textured(48, 48).with_fov(disk_fov(48, 48, 23.0)).unwrap();
        let mut last = -1.0f64;
        for k in 0..=10 {
            let v = 0.1 * k as f64;
            let spec = CorruptionSpec { vignette_strength: (v, v), ..CorruptionSpec::identity() };
            let (out, _) = corrupt(&img, &spec);
            let mse = out.data().iter().zip(img.data())
                .map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / out.data().len() as f64;
            assert!(mse >= last, "strength {v}: {mse} < {last}");
            last = mse;
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CorruptionSpec::default().validate().is_ok());
        assert!(CorruptionSpec { gain: (1.3, 0.7), ..Default::default() }.validate().is_err());
        assert!(CorruptionSpec { contrast_patch: 8, ..Default::default() }.validate().is_err());
        assert!(CorruptionSpec { vignette_strength: (0.0, 1.5), ..Default::default() }.validate().is_err());
        assert_eq!("single".parse::<CorruptionMode>().unwrap(), CorruptionMode::Single);
    }

    #[test]
    fn frame_seeds_differ_and_repeat() {
        assert_eq!(frame_seed(42, 3), frame_seed(42, 3));
        assert_ne!(frame_seed(42, 3), frame_seed(42, 4));
        assert_ne!(frame_seed(42, 3), frame_seed(43, 3));
    }
}
