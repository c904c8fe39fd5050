//! Resampling and value-range conversion into the pipeline's pixel domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    Bilinear,
    Nearest,
}

/// How raw dataset images are brought to the generator's I/O format.
///
/// Output values always lie in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_resolution: usize,
    pub resize_filter: ResizeFilter,
    #[serde(default = "default_true")]
    pub require_square: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self { target_resolution: 128, resize_filter: ResizeFilter::Bilinear, require_square: true }
    }
}

impl PreprocessSpec {
    pub fn new(target_resolution: usize, resize_filter: ResizeFilter) -> Self {
        Self { target_resolution, resize_filter, require_square: true }
    }

    /// Checks that `downsamplings` stride-2 layers reduce the target to exactly 1×1.
    pub fn validate_for_depth(&self, downsamplings: usize) -> Result<()> {
        let r = self.target_resolution;
        if !r.is_power_of_two() || r < (1usize << downsamplings) {
            return Err(Error::validation(format!(
                "target resolution {r} must be a power of two >= {} for {downsamplings} stride-2 layers",
                1usize << downsamplings
            )));
        }
        Ok(())
    }
}

/// An integer-valued image as stored by the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "raw image buffer has {} bytes, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Maps `v ∈ [0, 255]` to `v / 127.5 - 1` without resampling.
    pub fn to_signed(&self) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
        )
    }
}

/// Converts a raw image into the `[-1, 1]` domain at the target resolution.
pub fn preprocess(raw: &RawImage, spec: &PreprocessSpec) -> Result<Image> {
    if raw.height == 0 || raw.width == 0 || raw.channels == 0 {
        return Err(Error::validation("cannot preprocess an empty image"));
    }
    if spec.require_square && raw.height != raw.width {
        return Err(Error::validation(format!(
            "expected a square image, got {}x{}",
            raw.height, raw.width
        )));
    }
    resample(&raw.to_signed()?, spec.target_resolution, spec.resize_filter)
}

/// Resizes an already-converted image to `size × size`.
pub fn resample(img: &Image, size: usize, filter: ResizeFilter) -> Result<Image> {
    if size == 0 {
        return Err(Error::validation("target resolution must be positive"));
    }
    let (h, w, c) = img.shape();
    if h == size && w == size {
        return Ok(img.clone());
    }
    let rows = axis_taps(h, size, filter);
    let cols = axis_taps(w, size, filter);

    // Horizontal pass into an h×size buffer, then vertical.
    let mut out = Vec::with_capacity(c * size * size);
    let mut tmp = vec![0f32; h * size];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, tap) in cols.iter().enumerate() {
                tmp[y * size + x] = tap.apply(row, 1);
            }
        }
        for tap in &rows {
            for x in 0..size {
                out.push(tap.apply(&tmp[x..], size));
            }
        }
    }
    Image::new(size, size, c, out)
}

/// Two-point interpolation stencil along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

impl Tap {
    #[inline]
    fn apply(&self, line: &[f32], stride: usize) -> f32 {
        let a = line[self.lo * stride];
        if self.frac == 0.0 {
            return a;
        }
        let b = line[self.hi * stride];
        a + (b - a) * self.frac
    }
}

fn axis_taps(input: usize, output: usize, filter: ResizeFilter) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| match filter {
            ResizeFilter::Nearest => {
                let src = (((i as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                Tap { lo: src, hi: src, frac: 0.0 }
            }
            ResizeFilter::Bilinear => {
                // Half-pixel centres, edge-clamped.
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                Tap { lo, hi, frac: (src - lo as f64) as f32 }
            }
        })
        .collect()
}
