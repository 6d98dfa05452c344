use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{DetailParams, Interpolation, RenderError};
use crate::raster::LinearRaster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    LinearXyz,
    /// sRGB primaries, sRGB transfer curve.
    #[default]
    DisplayRgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    ScreenSimulation,
    #[default]
    Demosaic,
    DemosaicWithDetail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub exposure: f64,
    pub white_balance: [f64; 3],
    pub saturation: f64,
    pub output_space: OutputSpace,
    pub mode: RenderMode,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub detail: DetailParams,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            exposure: 1.0,
            white_balance: [1.0; 3],
            saturation: 1.0,
            output_space: OutputSpace::default(),
            mode: RenderMode::default(),
            interpolation: Interpolation::default(),
            detail: DetailParams::default(),
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.exposure > 0.0 && self.exposure.is_finite()) {
            return Err(RenderError::BadParams(format!("exposure {}", self.exposure)));
        }
        if self.white_balance.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(RenderError::BadParams(format!(
                "white balance gains {:?}",
                self.white_balance
            )));
        }
        if !(self.saturation >= 0.0 && self.saturation.is_finite()) {
            return Err(RenderError::BadParams(format!("saturation {}", self.saturation)));
        }
        self.detail.validate()
    }
}

/// Weights defining luma in the given output space.
pub fn luma_weights(space: OutputSpace) -> [f64; 3] {
    match space {
        OutputSpace::LinearXyz => [0.0, 1.0, 0.0],
        OutputSpace::DisplayRgb => [0.2126, 0.7152, 0.0722],
    }
}

/// sRGB transfer curve.
pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalizeStats {
    pub clamped_pixels: usize,
    pub clamped_fraction: f64,
}

/// Colour matrix, exposure, white balance and saturation, then encoding.
pub fn finalize(
    rgb: &LinearRaster,
    params: &RenderParams,
    process_to_output: &Matrix3<f64>,
) -> Result<(LinearRaster, FinalizeStats), RenderError> {
    params.validate()?;
    if rgb.channels() != 3 {
        return Err(RenderError::Channels(3));
    }
    let m = process_to_output;
    let luma = luma_weights(params.output_space);
    let gains = params.white_balance.map(|g| g * params.exposure);
    let mut clamped = 0usize;
    let mut out = Vec::with_capacity(rgb.samples().len());
    for px in rgb.samples().chunks_exact(3) {
        let v = [px[0] as f64, px[1] as f64, px[2] as f64];
        let mut o = [0.0; 3];
        for (r, o) in o.iter_mut().enumerate() {
            *o = (m[(r, 0)] * v[0] + m[(r, 1)] * v[1] + m[(r, 2)] * v[2]) * gains[r];
        }
        if params.saturation != 1.0 {
            let l = luma[0] * o[0] + luma[1] * o[1] + luma[2] * o[2];
            for c in o.iter_mut() {
                *c = l + params.saturation * (*c - l);
            }
        }
        if o.iter().any(|c| !(0.0..=1.0).contains(c)) {
            clamped += 1;
        }
        for c in o {
            let c = c.clamp(0.0, 1.0);
            out.push(match params.output_space {
                OutputSpace::LinearXyz => c as f32,
                OutputSpace::DisplayRgb => srgb_encode(c) as f32,
            });
        }
    }
    let n = rgb.width() * rgb.height();
    let raster = LinearRaster::new(rgb.width(), rgb.height(), 3, out, rgb.ppi(), rgb.source_tag())
        .map_err(|e| RenderError::BadParams(e.to_string()))?;
    Ok((
        raster,
        FinalizeStats {
            clamped_pixels: clamped,
            clamped_fraction: clamped as f64 / n as f64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::SourceTag;

    fn linear() -> RenderParams {
        RenderParams {
            output_space: OutputSpace::LinearXyz,
            ..Default::default()
        }
    }

    fn pixels(v: &[f32]) -> LinearRaster {
        LinearRaster::new(v.len() / 3, 1, 3, v.to_vec(), 100.0, SourceTag::PositiveTransparency).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let r = pixels(&[0.1, 0.2, 0.3, 0.123_456_78, 0.999_999, 1e-7]);
        let (out, stats) = finalize(&r, &linear(), &Matrix3::identity()).unwrap();
        assert_eq!(out, r);
        assert_eq!(stats.clamped_pixels, 0);
    }

    #[test]
    fn exposure_is_a_linear_gain() {
        let r = pixels(&[0.1, 0.2, 0.3]);
        let p = RenderParams {
            exposure: 2.0,
            ..linear()
        };
        let (out, _) = finalize(&r, &p, &Matrix3::identity()).unwrap();
        let want = [0.2f32, 0.4, 0.6];
        for (a, b) in out.samples().iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_saturation_is_gray() {
        let r = pixels(&[0.1, 0.5, 0.3, 0.9, 0.0, 0.2]);
        for space in [OutputSpace::LinearXyz, OutputSpace::DisplayRgb] {
            let p = RenderParams {
                saturation: 0.0,
                output_space: space,
                ..Default::default()
            };
            let (out, _) = finalize(&r, &p, &Matrix3::identity()).unwrap();
            for px in out.samples().chunks_exact(3) {
                assert_eq!(px[0], px[1]);
                assert_eq!(px[1], px[2]);
            }
        }
    }

    #[test]
    fn out_of_range_values_are_counted() {
        let r = pixels(&[0.6, 0.6, 0.6, 0.1, 0.1, 0.1]);
        let p = RenderParams {
            exposure: 2.0,
            ..linear()
        };
        let (_, stats) = finalize(&r, &p, &Matrix3::identity()).unwrap();
        assert_eq!(stats.clamped_pixels, 1);
        assert_eq!(stats.clamped_fraction, 0.5);
    }

    #[test]
    fn invalid_params_rejected() {
        let r = pixels(&[0.1, 0.1, 0.1]);
        for p in [
            RenderParams { exposure: 0.0, ..linear() },
            RenderParams { white_balance: [1.0, -1.0, 1.0], ..linear() },
            RenderParams { saturation: f64::NAN, ..linear() },
        ] {
            assert!(finalize(&r, &p, &Matrix3::identity()).is_err());
        }
    }

    #[test]
    fn srgb_curve_landmarks() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-12);
        assert!((srgb_encode(0.18) - 0.461_356).abs() < 1e-5);
    }
}
