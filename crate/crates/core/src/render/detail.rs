use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PatchGrid, RenderError};
use crate::geometry::RegistrationMap;
use crate::raster::{gaussian_blur_f64, LinearRaster, SourceTag};

/// Clamp bounds for the luminance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetailParams {
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for DetailParams {
    fn default() -> Self {
        Self {
            ratio_min: 0.2,
            ratio_max: 5.0,
        }
    }
}

impl DetailParams {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.ratio_min > 0.0 && self.ratio_min <= 1.0 && self.ratio_max >= 1.0 && self.ratio_max.is_finite()) {
            return Err(RenderError::BadParams(format!(
                "detail ratio bounds [{}, {}] must bracket 1",
                self.ratio_min, self.ratio_max
            )));
        }
        Ok(())
    }
}

/// Resamples the demosaiced image bilinearly onto a `width × height` scan
/// raster of resolution `ppi`. Unmapped pixels are black.
pub fn upsample_to_scan(
    demosaiced: &LinearRaster,
    grid: &PatchGrid,
    map: &RegistrationMap,
    width: usize,
    height: usize,
    ppi: f64,
) -> Result<LinearRaster, RenderError> {
    if demosaiced.channels() != 3 {
        return Err(RenderError::Channels(3));
    }
    let mut out = vec![0.0f32; width * height * 3];
    out.par_chunks_mut(width * 3).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let Ok(p) = map.scan_to_screen([x as f64 + 0.5, y as f64 + 0.5]) else {
                continue;
            };
            let g = grid.screen_to_grid(p);
            for c in 0..3 {
                row[x * 3 + c] = demosaiced.sample_bilinear(g[0], g[1], c);
            }
        }
    });
    LinearRaster::new(width, height, 3, out, ppi, SourceTag::PositiveTransparency)
        .map_err(|e| RenderError::BadParams(e.to_string()))
}

/// Upsamples the demosaiced image to scan resolution and modulates it by
/// `positive / blur(positive)`, the blur a Gaussian with σ of half a tile
/// period.
pub fn recover_detail(
    demosaiced: &LinearRaster,
    grid: &PatchGrid,
    positive: &LinearRaster,
    map: &RegistrationMap,
    params: &DetailParams,
) -> Result<LinearRaster, RenderError> {
    params.validate()?;
    if positive.channels() != 1 {
        return Err(RenderError::Channels(1));
    }
    if demosaiced.channels() != 3 {
        return Err(RenderError::Channels(3));
    }
    let (w, h) = (positive.width(), positive.height());
    let sigma = 0.5 * map.period_px();
    let blurred = gaussian_blur_f64(positive, sigma);
    let src = positive.samples();

    let mut out = vec![0.0f32; w * h * 3];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let Ok(p) = map.scan_to_screen([x as f64 + 0.5, y as f64 + 0.5]) else {
                continue;
            };
            let g = grid.screen_to_grid(p);
            let b = blurred[y * w + x];
            let ratio = if b <= 1e-12 {
                0.0
            } else {
                (src[y * w + x] as f64 / b).clamp(params.ratio_min, params.ratio_max)
            };
            for c in 0..3 {
                let base = demosaiced.sample_bilinear(g[0], g[1], c) as f64;
                row[x * 3 + c] = (base * ratio) as f32;
            }
        }
    });
    LinearRaster::new(w, h, 3, out, positive.ppi(), SourceTag::PositiveTransparency)
        .map_err(|e| RenderError::BadParams(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScanFrame;
    use crate::screen::{pattern_preset, ProcessId};

    fn setup() -> (PatchGrid, LinearRaster, RegistrationMap) {
        let p = pattern_preset(ProcessId::Paget).unwrap();
        let m = RegistrationMap::similarity(ScanFrame::new(80, 80), 10.0, 0.0, [0.0, 0.0]).unwrap();
        let vals: Vec<Option<f64>> = (0..256).map(|k| Some(0.2 + 0.002 * k as f64)).collect();
        let g = PatchGrid::from_values(&p, [0, 0], 16, 16, &vals);
        let d = super::super::demosaic(&g, &p).unwrap();
        (g, d, m)
    }

    #[test]
    fn smooth_positive_gives_upsampled_demosaic() {
        let (g, d, m) = setup();
        let flat = LinearRaster::filled(80, 80, 1, 0.6, 1000.0, SourceTag::PositiveTransparency).unwrap();
        let out = recover_detail(&d, &g, &flat, &m, &DetailParams::default()).unwrap();
        for y in 0..80 {
            for x in 0..80 {
                let p = m.scan_to_screen([x as f64 + 0.5, y as f64 + 0.5]).unwrap();
                let gp = g.screen_to_grid(p);
                for c in 0..3 {
                    let want = d.sample_bilinear(gp[0], gp[1], c);
                    assert!((out.get(x, y, c) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn black_positive_gives_black() {
        let (g, d, m) = setup();
        let black = LinearRaster::filled(80, 80, 1, 0.0, 1000.0, SourceTag::PositiveTransparency).unwrap();
        let out = recover_detail(&d, &g, &black, &m, &DetailParams::default()).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bounds_must_bracket_one() {
        let bad = DetailParams {
            ratio_min: 1.5,
            ratio_max: 5.0,
        };
        assert!(bad.validate().is_err());
    }
}
