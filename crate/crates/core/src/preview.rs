//! Deterministic preview tiles of any pipeline stage over a viewport.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nyquist_gate, NyquistVerdict, RegistrationMap};
use crate::raster::{encode_png, LinearRaster, Rect};
use crate::render::{
    collect_patch_grid, demosaic_with, finalize, recover_detail, screen_dye_rgb, simulate_viewing_screen,
    upsample_to_scan, RenderError, RenderMode, RenderParams,
};
use crate::screen::ScreenPattern;

/// Largest tile side in output pixels.
pub const MAX_TILE_SIDE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreviewStage {
    /// The scan as loaded, before inversion.
    Scan,
    #[serde(rename = "screen_sim")]
    ScreenSimulation,
    /// Demosaiced colour without detail recovery.
    Demosaic,
    /// The configured render mode, finalized.
    #[default]
    Final,
}

impl std::str::FromStr for PreviewStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRequest {
    pub stage: PreviewStage,
    /// Region of the scan in scan pixels.
    pub viewport: Rect,
    /// Scan pixels per output pixel along each axis.
    pub zoom: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum PreviewError {
    #[error("viewport {0:?} lies outside the {1}x{2} scan")]
    ViewportOutOfBounds(Rect, usize, usize),
    #[error("zoom must be at least 1")]
    BadZoom,
    #[error("tile {0}x{1} exceeds {MAX_TILE_SIDE}x{MAX_TILE_SIDE}")]
    TileTooLarge(usize, usize),
    #[error("stage needs a registration map")]
    Unregistered,
    #[error("{0:.3} pixels per patch is below 2")]
    Nyquist(f64),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("encoding failed: {0}")]
    Encode(String),
}

/// Everything a tile depends on.
#[derive(Debug, Clone, Copy)]
pub struct PreviewInputs<'a> {
    /// Mono scan before inversion; same size as `positive`.
    pub scan: &'a LinearRaster,
    pub positive: &'a LinearRaster,
    pub pattern: &'a ScreenPattern,
    pub map: Option<&'a RegistrationMap>,
    pub render: &'a RenderParams,
    /// Process RGB → output space.
    pub matrix: &'a Matrix3<f64>,
}

/// Renders a tile as display-ready samples in `[0, 1]`.
pub fn render_tile(inp: &PreviewInputs, req: &TileRequest) -> Result<LinearRaster, PreviewError> {
    let (w, h) = (inp.positive.width(), inp.positive.height());
    let vp = req.viewport;
    if !vp.fits(w, h) {
        return Err(PreviewError::ViewportOutOfBounds(vp, w, h));
    }
    if req.zoom == 0 {
        return Err(PreviewError::BadZoom);
    }
    let (ow, oh) = (vp.w.div_ceil(req.zoom), vp.h.div_ceil(req.zoom));
    if ow > MAX_TILE_SIDE || oh > MAX_TILE_SIDE {
        return Err(PreviewError::TileTooLarge(ow, oh));
    }

    if req.stage == PreviewStage::Scan {
        if (inp.scan.width(), inp.scan.height()) != (w, h) {
            return Err(PreviewError::ViewportOutOfBounds(vp, inp.scan.width(), inp.scan.height()));
        }
        let crop = inp.scan.crop(vp.x, vp.y, vp.w, vp.h).expect("viewport checked");
        return Ok(downsample(&crop, req.zoom));
    }

    let map = inp.map.ok_or(PreviewError::Unregistered)?;
    if let NyquistVerdict::Reject(v) = nyquist_gate(map, inp.pattern, inp.positive) {
        return Err(PreviewError::Nyquist(v));
    }
    // Render over the viewport plus a margin of two tiles so that patches
    // cut by the viewport edge are still collected whole.
    let margin = (2.0 * map.period_px()).ceil() as usize;
    let x0 = vp.x.saturating_sub(margin);
    let y0 = vp.y.saturating_sub(margin);
    let x1 = (vp.x + vp.w + margin).min(w);
    let y1 = (vp.y + vp.h + margin).min(h);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let crop = inp.positive.crop(x0, y0, cw, ch).expect("margin is clamped");
    let cmap = map.for_crop(x0 as f64, y0 as f64, cw, ch);

    let mode = match req.stage {
        PreviewStage::ScreenSimulation => RenderMode::ScreenSimulation,
        PreviewStage::Demosaic => RenderMode::Demosaic,
        _ => inp.render.mode,
    };
    let full = if mode == RenderMode::ScreenSimulation {
        let dyes = screen_dye_rgb(inp.matrix, inp.pattern.class_area_fractions());
        let sim = simulate_viewing_screen(&crop, &cmap, inp.pattern, &dyes)?;
        finalize(&sim.image, inp.render, &Matrix3::identity())?.0
    } else {
        let grid = collect_patch_grid(&crop, &cmap, inp.pattern)?;
        let rgb = demosaic_with(&grid, inp.pattern, inp.render.interpolation)?;
        let up = if mode == RenderMode::DemosaicWithDetail {
            recover_detail(&rgb, &grid, &crop, &cmap, &inp.render.detail)?
        } else {
            upsample_to_scan(&rgb, &grid, &cmap, cw, ch, crop.ppi())?
        };
        finalize(&up, inp.render, inp.matrix)?.0
    };
    let view = full.crop(vp.x - x0, vp.y - y0, vp.w, vp.h).expect("viewport inside the margin crop");
    Ok(downsample(&view, req.zoom))
}

/// PNG bytes of [`render_tile`].
pub fn tile_png(inp: &PreviewInputs, req: &TileRequest) -> Result<Vec<u8>, PreviewError> {
    let tile = render_tile(inp, req)?;
    encode_png(&tile).map_err(|e| PreviewError::Encode(e.to_string()))
}

/// Box average over `zoom × zoom` blocks; edge blocks average what they cover.
fn downsample(r: &LinearRaster, zoom: usize) -> LinearRaster {
    if zoom == 1 {
        return r.clone();
    }
    let c = r.channels();
    let (w, h) = (r.width(), r.height());
    let (ow, oh) = (w.div_ceil(zoom), h.div_ceil(zoom));
    let mut out = vec![0.0f32; ow * oh * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0f64; 3];
            let mut n = 0usize;
            for y in oy * zoom..((oy + 1) * zoom).min(h) {
                for x in ox * zoom..((ox + 1) * zoom).min(w) {
                    for (k, a) in acc.iter_mut().enumerate().take(c) {
                        *a += r.get(x, y, k) as f64;
                    }
                    n += 1;
                }
            }
            for k in 0..c {
                out[(oy * ow + ox) * c + k] = (acc[k] / n as f64) as f32;
            }
        }
    }
    LinearRaster::new(ow, oh, c, out, r.ppi() / zoom as f64, r.source_tag()).expect("averages stay in range")
}
