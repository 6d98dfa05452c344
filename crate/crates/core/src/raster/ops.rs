use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LinearRaster, RasterError, SourceTag};

/// RGB → mono reduction. `selected_channel` overrides the weights, which is
/// how an infrared channel is pulled out of a multi-channel capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMix {
    pub weights: [f64; 3],
    #[serde(default)]
    pub selected_channel: Option<usize>,
}

impl Default for ChannelMix {
    fn default() -> Self {
        Self {
            weights: [1.0 / 3.0; 3],
            selected_channel: None,
        }
    }
}

impl ChannelMix {
    pub fn channel(index: usize) -> Self {
        Self {
            selected_channel: Some(index),
            ..Self::default()
        }
    }

    fn validate(&self, channels: usize) -> Result<(), RasterError> {
        if let Some(c) = self.selected_channel {
            if c >= channels {
                return Err(RasterError::BadWeights(format!(
                    "selected channel {c} but raster has {channels}"
                )));
            }
            return Ok(());
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(RasterError::BadWeights(format!(
                "negative or non-finite weight in {:?}",
                self.weights
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(RasterError::BadWeights(format!("weights sum to {sum}")));
        }
        Ok(())
    }
}

pub fn mix_to_mono(raster: &LinearRaster, mix: &ChannelMix) -> Result<LinearRaster, RasterError> {
    if raster.channels() == 1 {
        return Ok(raster.clone());
    }
    mix.validate(raster.channels())?;
    let out: Vec<f32> = raster
        .samples()
        .chunks_exact(3)
        .map(|px| match mix.selected_channel {
            Some(c) => px[c],
            None => {
                let w = mix.weights;
                (w[0] * px[0] as f64 + w[1] * px[1] as f64 + w[2] * px[2] as f64) as f32
            }
        })
        .collect();
    Ok(raster.with_samples(1, out))
}

/// Characteristic-curve parameters for the negative → positive copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionParams {
    pub gamma: f64,
    pub t_floor: f64,
}

impl Default for InversionParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            t_floor: 0.01,
        }
    }
}

impl InversionParams {
    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(RasterError::BadGamma(self.gamma));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(RasterError::BadFloor(self.t_floor));
        }
        Ok(())
    }

    /// Positive transmittance produced by a negative sample.
    #[inline]
    pub fn invert(&self, t_neg: f64) -> f64 {
        (self.t_floor / t_neg.max(self.t_floor))
            .powf(self.gamma)
            .clamp(0.0, 1.0)
    }
}

/// Reciprocal power-law contact copy: `T_neg = t_floor` maps to white,
/// clear film maps to `t_floor^gamma`.
pub fn negative_to_positive(
    raster: &LinearRaster,
    params: &InversionParams,
) -> Result<LinearRaster, RasterError> {
    params.validate()?;
    if raster.source_tag() != SourceTag::Negative {
        return Err(RasterError::Invalid(format!(
            "expected a negative, got {:?}",
            raster.source_tag()
        )));
    }
    if raster.channels() != 1 {
        return Err(RasterError::Invalid("inversion expects one channel".into()));
    }
    let out: Vec<f32> = raster
        .samples()
        .par_iter()
        .map(|&t| params.invert(t as f64) as f32)
        .collect();
    Ok(raster
        .with_samples(1, out)
        .with_source_tag(SourceTag::PositiveTransparency))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated edges, computed per channel in f64.
pub fn gaussian_blur_f64(raster: &LinearRaster, sigma: f64) -> Vec<f64> {
    let (w, h, ch) = (raster.width(), raster.height(), raster.channels());
    let src = raster.samples();
    if sigma < 0.25 {
        return src.iter().map(|&v| v as f64).collect();
    }
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;

    let mut horiz = vec![0.0f64; w * h * ch];
    horiz
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(y, out)| {
            let row = &src[y * w * ch..(y + 1) * w * ch];
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let sx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                        acc += kv * row[sx * ch + c] as f64;
                    }
                    out[x * ch + c] = acc;
                }
            }
        });

    let mut out = vec![0.0f64; w * h * ch];
    out.par_chunks_mut(w * ch).enumerate().for_each(|(y, row)| {
        for (i, kv) in k.iter().enumerate() {
            let sy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
            let src_row = &horiz[sy * w * ch..(sy + 1) * w * ch];
            for (o, s) in row.iter_mut().zip(src_row) {
                *o += kv * s;
            }
        }
    });
    out
}

pub fn gaussian_blur(raster: &LinearRaster, sigma: f64) -> LinearRaster {
    let blurred = gaussian_blur_f64(raster, sigma);
    raster.with_samples(
        raster.channels(),
        blurred.into_iter().map(|v| v as f32).collect(),
    )
}

/// Plain unsharp mask. Screen-aware sharpening would slot in here.
pub fn sharpen(raster: &LinearRaster, radius: f64, amount: f64) -> LinearRaster {
    if amount == 0.0 || radius < 0.25 {
        return raster.clone();
    }
    let blurred = gaussian_blur_f64(raster, radius);
    let out = raster
        .samples()
        .iter()
        .zip(&blurred)
        .map(|(&v, &b)| {
            let v = v as f64;
            (v + amount * (v - b)).clamp(0.0, 1.0) as f32
        })
        .collect();
    raster.with_samples(raster.channels(), out)
}
