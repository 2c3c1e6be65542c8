//! Image, mask and probability-map containers plus PNG I/O and FOV extraction.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, RgbImage};
use thiserror::Error;

use crate::morph;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("file not found: {0}")]
    Missing(String),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("{path}: expected 8-bit RGB raster, found {found}")]
    NotRgb { path: String, found: String },
    #[error("i/o failure on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    Dimensions(usize, usize, usize, usize),
    #[error("invalid raster: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Per-pixel boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "mask data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(RasterError::Dimensions(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert_eq!(self.dims(), other.dims());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert_eq!(self.dims(), other.dims());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && !b)
            .collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| !v).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// Per-pixel probability map with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Values are clamped into [0,1]; NaN becomes 0.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!(
                "probmap data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn threshold(&self, t: f32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| p >= t).collect(),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            data: mask.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// RGB frame with intensities in [0,1], interleaved row-major, and a field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    from_8bit: bool,
    fov: BinaryMask,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid("zero-sized image".into()));
        }
        if data.len() != width * height * 3 {
            return Err(RasterError::Invalid(format!(
                "image data length {} != {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RasterError::Invalid("intensity outside [0,1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
            from_8bit: false,
            fov: BinaryMask::filled(width, height, true),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
            from_8bit: false,
            fov: BinaryMask::filled(width, height, true),
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
            from_8bit: false,
            fov: BinaryMask::filled(width, height, true),
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
            from_8bit: true,
            fov: BinaryMask::filled(w as usize, h as usize, true),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_8bit_origin(&self) -> bool {
        self.from_8bit
    }

    pub fn fov(&self) -> &BinaryMask {
        &self.fov
    }

    pub fn with_fov(mut self, fov: BinaryMask) -> Result<Self> {
        self.set_fov(fov)?;
        Ok(self)
    }

    pub fn set_fov(&mut self, fov: BinaryMask) -> Result<()> {
        if fov.dims() != self.dims() {
            return Err(RasterError::Dimensions(
                self.width,
                self.height,
                fov.width(),
                fov.height(),
            ));
        }
        self.fov = fov;
        Ok(())
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
        self.from_8bit = false;
    }

    /// Mean of R, G and B.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let p = self.pixel(x, y);
        (p[0] + p[1] + p[2]) / 3.0
    }

    /// Replace the intensity buffer, keeping dimensions and FOV. Values are clamped.
    pub fn map_data(&self, f: impl Fn(usize, f32) -> f32) -> Self {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i, v).clamp(0.0, 1.0))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
            from_8bit: false,
            fov: self.fov.clone(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    let shown = path.display().to_string();
    if !path.exists() {
        return Err(RasterError::Missing(shown));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| RasterError::Io {
            path: shown.clone(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| RasterError::Io {
            path: shown.clone(),
            reason: e.to_string(),
        })?;
    reader.decode().map_err(|e| RasterError::Decode {
        path: shown,
        reason: e.to_string(),
    })
}

/// Load an 8-bit RGB frame. The FOV starts all-true.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    match open_dynamic(path)? {
        DynamicImage::ImageRgb8(rgb) => Ok(RasterImage::from_rgb8(&rgb)),
        other => Err(RasterError::NotRgb {
            path: path.display().to_string(),
            found: format!("{:?}", other.color()),
        }),
    }
}

/// Load an annotation or FOV mask; any gray level above 127 is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let gray = open_dynamic(path.as_ref())?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v > 127).collect();
    BinaryMask::from_vec(w as usize, h as usize, data)
}

pub fn load_probmap(path: impl AsRef<Path>) -> Result<ProbMap> {
    let gray = open_dynamic(path.as_ref())?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    ProbMap::from_vec(w as usize, h as usize, data)
}

fn save_gray(raw: Vec<u8>, width: usize, height: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| RasterError::Invalid("gray buffer length".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RasterError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let raw = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    save_gray(raw, mask.width, mask.height, path.as_ref())
}

pub fn save_probmap(pm: &ProbMap, path: impl AsRef<Path>) -> Result<()> {
    let raw = pm.data.iter().map(|&v| quantize(v)).collect();
    save_gray(raw, pm.width, pm.height, path.as_ref())
}

pub fn save_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RasterError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

/// Output of [`extract_fov`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FovExtraction {
    pub mask: BinaryMask,
    /// Set when no pixel passed the luminance threshold.
    pub empty: bool,
}

pub const DEFAULT_FOV_THRESHOLD: f32 = 0.04;

/// Luminance threshold, one 3x3 closing, then the largest 8-connected bright region.
pub fn extract_fov(img: &RasterImage, luma_threshold: f32) -> FovExtraction {
    let (w, h) = img.dims();
    let bright = BinaryMask::from_fn(w, h, |x, y| img.luma(x, y) > luma_threshold);
    if bright.is_empty() {
        return FovExtraction {
            mask: bright,
            empty: true,
        };
    }
    let closed = morph::close3(&bright);
    let mask = morph::largest_component(&closed);
    FovExtraction { mask, empty: false }
}

/// `<stem>_mask.png`, `<stem>_prob.png` and friends.
pub fn sibling_path(dir: &Path, stem: &str, suffix: &str) -> std::path::PathBuf {
    if suffix.is_empty() {
        dir.join(format!("{stem}.png"))
    } else {
        dir.join(format!("{stem}_{suffix}.png"))
    }
}

/// The file stem used for derived outputs.
pub fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frame".to_string())
}
