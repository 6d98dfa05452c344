//! Linear scan rasters and the early pipeline stages that operate on them.
//!
//! Samples are linear transmittance in `[0, 1]`. No tone curve is ever
//! applied to a [`LinearRaster`]; density only shows up in diagnostics.

mod io;
mod ops;

pub use io::{encode_png, load_raster, save_png_preview, save_tiff16, Encoding, LoadOptions, LoadedRaster, CLIP_WARNING_FRACTION};
pub use ops::{
    gaussian_blur, gaussian_blur_f64, mix_to_mono, negative_to_positive, sharpen, ChannelMix, InversionParams,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("no resolution metadata and no PPI override given")]
    MissingPpi,
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("bad channel weights: {0}")]
    BadWeights(String),
    #[error("gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error("transmittance floor must lie in (0, 1), got {0}")]
    BadFloor(f64),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the scanned object was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Negative,
    PositiveTransparency,
    Infrared,
}

/// Axis-aligned pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Row-major grid of linear transmittance samples with physical resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRaster {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
    ppi: f64,
    source_tag: SourceTag,
}

impl LinearRaster {
    /// Builds a raster, clamping samples into `[0, 1]`. Non-finite samples are
    /// rejected.
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        mut samples: Vec<f32>,
        ppi: f64,
        source_tag: SourceTag,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid("empty raster".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(RasterError::Invalid(format!("{channels} channels")));
        }
        if !(ppi.is_finite() && ppi > 0.0) {
            return Err(RasterError::Invalid(format!("ppi {ppi}")));
        }
        if samples.len() != width * height * channels {
            return Err(RasterError::Invalid(format!(
                "expected {} samples, got {}",
                width * height * channels,
                samples.len()
            )));
        }
        for s in samples.iter_mut() {
            if !s.is_finite() {
                return Err(RasterError::Invalid("non-finite sample".into()));
            }
            *s = s.clamp(0.0, 1.0);
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
            ppi,
            source_tag,
        })
    }

    /// Constant-valued raster.
    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        value: f32,
        ppi: f64,
        source_tag: SourceTag,
    ) -> Result<Self, RasterError> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
            ppi,
            source_tag,
        )
    }

    /// Builds a single-channel raster by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        ppi: f64,
        source_tag: SourceTag,
        f: impl Fn(usize, usize) -> f32,
    ) -> Result<Self, RasterError> {
        let mut samples = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                samples.push(f(x, y));
            }
        }
        Self::new(width, height, 1, samples, ppi, source_tag)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ppi(&self) -> f64 {
        self.ppi
    }

    pub fn source_tag(&self) -> SourceTag {
        self.source_tag
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Pixel row as a slice of interleaved channels.
    pub fn row(&self, y: usize) -> &[f32] {
        let stride = self.width * self.channels;
        &self.samples[y * stride..(y + 1) * stride]
    }

    pub fn with_source_tag(mut self, tag: SourceTag) -> Self {
        self.source_tag = tag;
        self
    }

    pub fn with_ppi(mut self, ppi: f64) -> Self {
        assert!(ppi > 0.0 && ppi.is_finite());
        self.ppi = ppi;
        self
    }

    /// Same geometry and metadata, new samples (clamped).
    pub(crate) fn with_samples(&self, channels: usize, samples: Vec<f32>) -> Self {
        debug_assert_eq!(samples.len(), self.width * self.height * channels);
        Self {
            width: self.width,
            height: self.height,
            channels,
            samples: samples.into_iter().map(|s| s.clamp(0.0, 1.0)).collect(),
            ppi: self.ppi,
            source_tag: self.source_tag,
        }
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, RasterError> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(RasterError::Invalid(format!(
                "crop {x0},{y0} {w}x{h} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut samples = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let row = self.row(y);
            samples.extend_from_slice(&row[x0 * c..(x0 + w) * c]);
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            samples,
            ppi: self.ppi,
            source_tag: self.source_tag,
        })
    }

    /// Optical density `-log10(T)` of a single-channel sample, floored at `T = 1e-6`.
    pub fn density(&self, x: usize, y: usize) -> f64 {
        -(self.get(x, y, 0).max(1e-6) as f64).log10()
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates; pixel
    /// centres sit at integer + 0.5. Edges are clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (fx - x0 as f64) as f32;
        let ty = (fy - y0 as f64) as f32;
        let a = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
        let b = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
        a * (1.0 - ty) + b * ty
    }
}
