use nalgebra::Matrix3;
use rayon::prelude::*;

use super::RenderError;
use crate::geometry::RegistrationMap;
use crate::raster::{LinearRaster, SourceTag};
use crate::screen::ScreenPattern;

#[derive(Debug, Clone)]
pub struct ScreenSimulation {
    pub image: LinearRaster,
    pub unmapped_pixels: usize,
}

/// Multiplies each scan pixel by the colour of the viewing-screen element
/// it falls on. Unmapped pixels are black.
pub fn simulate_viewing_screen(
    positive: &LinearRaster,
    map: &RegistrationMap,
    pattern: &ScreenPattern,
    dye_rgb: &[[f64; 3]; 3],
) -> Result<ScreenSimulation, RenderError> {
    if positive.channels() != 1 {
        return Err(RenderError::Channels(1));
    }
    let (w, h) = (positive.width(), positive.height());
    let src = positive.samples();
    let mut out = vec![0.0f32; w * h * 3];
    let unmapped: usize = out
        .par_chunks_mut(w * 3)
        .enumerate()
        .map(|(y, row)| {
            let mut unmapped = 0;
            for x in 0..w {
                let Ok(p) = map.scan_to_screen([x as f64 + 0.5, y as f64 + 0.5]) else {
                    unmapped += 1;
                    continue;
                };
                let dye = &dye_rgb[pattern.color_at(p).index()];
                let l = src[y * w + x] as f64;
                for c in 0..3 {
                    row[x * 3 + c] = (dye[c] * l) as f32;
                }
            }
            unmapped
        })
        .sum();
    let image = LinearRaster::new(w, h, 3, out, positive.ppi(), SourceTag::PositiveTransparency)
        .map_err(|e| RenderError::BadParams(e.to_string()))?;
    Ok(ScreenSimulation {
        image,
        unmapped_pixels: unmapped,
    })
}

/// Per-element screen colours in output space from the process matrix.
///
/// Column `c` of `process_to_output` already carries the element's area
/// fraction, so it is divided back out; the set is then scaled so the
/// brightest channel of any element is 1.
pub fn screen_dye_rgb(process_to_output: &Matrix3<f64>, class_fractions: [f64; 3]) -> [[f64; 3]; 3] {
    let mut dyes = [[0.0; 3]; 3];
    for (c, d) in dyes.iter_mut().enumerate() {
        let f = class_fractions[c];
        if f > 0.0 {
            for r in 0..3 {
                d[r] = (process_to_output[(r, c)] / f).max(0.0);
            }
        }
    }
    let peak = dyes.iter().flatten().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in dyes.iter_mut().flatten() {
            *v /= peak;
        }
    }
    dyes
}
