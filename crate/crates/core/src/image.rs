//! Dense single-image buffers in channel-major layout.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An `H×W×C` image stored channel-major (`C×H×W`), values as `f32`.
///
/// Pipeline images live in `[-1, 1]`; the type itself does not enforce a
/// range so that intermediate products (for example `[0, 1]` classifier
/// inputs) can reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Errors unless every value lies in `[lo, hi]`.
    pub fn check_range(&self, lo: f32, hi: f32) -> Result<()> {
        match self.data.iter().find(|v| !(**v >= lo && **v <= hi)) {
            Some(v) => Err(Error::validation(format!("pixel value {v} outside [{lo}, {hi}]"))),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks same-shaped images into an `(N, C, H, W)` tensor.
    pub fn stack<'a>(
        images: impl IntoIterator<Item = &'a Image>,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let mut shape = None;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            match shape {
                None => shape = Some(img.shape()),
                Some(s) if s != img.shape() => {
                    return Err(Error::validation(format!(
                        "cannot stack images of shapes {s:?} and {:?}",
                        img.shape()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(&img.data);
            n += 1;
        }
        let (h, w, c) = shape.ok_or_else(|| Error::validation("cannot stack zero images"))?;
        Ok(Tensor::from_vec(data, (n, c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Splits an `(N, C, H, W)` tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat
            .chunks_exact(c * h * w)
            .take(n)
            .map(|chunk| Image { height: h, width: w, channels: c, data: chunk.to_vec() })
            .collect())
    }
}
