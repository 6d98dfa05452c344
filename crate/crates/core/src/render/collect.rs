use rayon::prelude::*;

use super::RenderError;
use crate::geometry::{Point, RegistrationMap};
use crate::raster::LinearRaster;
use crate::screen::{ColorClass, ScreenPattern};

/// Per-patch luminosity mosaic, one entry per patch site.
///
/// Site `(i, j)` of the grid is screen site `(origin[0] + i, origin[1] + j)`,
/// whose centre sits at `((origin + i + 0.5) / n, (origin + j + 0.5) / n)`
/// in tile units.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    width: usize,
    height: usize,
    sites_per_tile: usize,
    origin: [i64; 2],
    classes: Vec<ColorClass>,
    sums: Vec<f64>,
    weights: Vec<f64>,
    inside: Vec<bool>,
    min_weight: f64,
    unmapped_pixels: usize,
    patch_ppi: f64,
}

impl PatchGrid {
    /// Grid with given means; `None` entries are missing.
    pub fn from_values(
        pattern: &ScreenPattern,
        origin: [i64; 2],
        width: usize,
        height: usize,
        values: &[Option<f64>],
    ) -> Self {
        assert_eq!(values.len(), width * height);
        let classes = site_classes(pattern, origin, width, height);
        Self {
            width,
            height,
            sites_per_tile: pattern.sites_per_tile(),
            origin,
            classes,
            sums: values.iter().map(|v| v.unwrap_or(0.0)).collect(),
            weights: values.iter().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect(),
            inside: vec![true; width * height],
            min_weight: 0.5,
            unmapped_pixels: 0,
            patch_ppi: 25.4 / pattern.patch_pitch_mm(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sites_per_tile(&self) -> usize {
        self.sites_per_tile
    }

    pub fn origin(&self) -> [i64; 2] {
        self.origin
    }

    /// Whole tiles covered, rounded up.
    pub fn tiles(&self) -> (usize, usize) {
        let n = self.sites_per_tile;
        (self.width.div_ceil(n), self.height.div_ceil(n))
    }

    /// Resolution of the demosaiced image: one pixel per patch.
    pub fn patch_ppi(&self) -> f64 {
        self.patch_ppi
    }

    #[inline]
    pub fn class_at(&self, i: usize, j: usize) -> ColorClass {
        self.classes[j * self.width + i]
    }

    #[inline]
    pub fn mean(&self, i: usize, j: usize) -> Option<f64> {
        let k = j * self.width + i;
        (self.weights[k] >= self.min_weight).then(|| self.sums[k] / self.weights[k])
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[j * self.width + i]
    }

    /// Kernel-weighted sum of the luminosity collected into a site.
    pub fn weighted_sum(&self, i: usize, j: usize) -> f64 {
        self.sums[j * self.width + i]
    }

    /// Whether the site centre maps inside the scan.
    pub fn is_inside(&self, i: usize, j: usize) -> bool {
        self.inside[j * self.width + i]
    }

    /// Missing sites among those whose centre lies inside the scan.
    pub fn missing_fraction(&self) -> f64 {
        let mut inside = 0usize;
        let mut missing = 0usize;
        for (k, &ins) in self.inside.iter().enumerate() {
            if ins {
                inside += 1;
                if self.weights[k] < self.min_weight {
                    missing += 1;
                }
            }
        }
        if inside == 0 {
            1.0
        } else {
            missing as f64 / inside as f64
        }
    }

    pub fn unmapped_pixels(&self) -> usize {
        self.unmapped_pixels
    }

    /// Screen position (tile units) of the centre of site `(i, j)`.
    pub fn site_center(&self, i: usize, j: usize) -> Point {
        let n = self.sites_per_tile as f64;
        [
            (self.origin[0] as f64 + i as f64 + 0.5) / n,
            (self.origin[1] as f64 + j as f64 + 0.5) / n,
        ]
    }

    /// Continuous grid coordinates (site centres at integer + 0.5) of a
    /// screen point.
    pub fn screen_to_grid(&self, p: Point) -> Point {
        let n = self.sites_per_tile as f64;
        [p[0] * n - self.origin[0] as f64, p[1] * n - self.origin[1] as f64]
    }
}

fn site_classes(pattern: &ScreenPattern, origin: [i64; 2], w: usize, h: usize) -> Vec<ColorClass> {
    let mut out = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            out.push(pattern.site_class(origin[0] + i as i64, origin[1] + j as i64));
        }
    }
    out
}

const BLOCK_ROWS: usize = 32;
const BLOCKS_PER_WAVE: usize = 16;

/// Run-aggregated contributions of one block of scan rows.
struct BlockSum {
    entries: Vec<(usize, f64, f64)>,
    unmapped: usize,
}

/// Collects tent-weighted patch means. Each scan pixel contributes to the
/// patch containing its screen position with weight
/// `(1 - 2|dx|)(1 - 2|dy|)`, `dx, dy` its offset from the patch centre in
/// patch units.
pub fn collect_patch_grid(
    positive: &LinearRaster,
    map: &RegistrationMap,
    pattern: &ScreenPattern,
) -> Result<PatchGrid, RenderError> {
    if positive.channels() != 1 {
        return Err(RenderError::Channels(1));
    }
    let (w, h) = (positive.width(), positive.height());
    let n = pattern.sites_per_tile() as f64;

    let Some((lo, hi)) = footprint(map, w, h, n) else {
        return Err(RenderError::EmptyOverlap);
    };
    let a0 = lo[0].floor() as i64 - 2;
    let b0 = lo[1].floor() as i64 - 2;
    let gw = (hi[0].ceil() as i64 + 2 - a0).max(1) as usize;
    let gh = (hi[1].ceil() as i64 + 2 - b0).max(1) as usize;

    let mut sums = vec![0.0f64; gw * gh];
    let mut weights = vec![0.0f64; gw * gh];
    let mut unmapped = 0usize;

    let n_blocks = h.div_ceil(BLOCK_ROWS);
    let samples = positive.samples();
    for wave in (0..n_blocks).step_by(BLOCKS_PER_WAVE) {
        let parts: Vec<BlockSum> = (wave..(wave + BLOCKS_PER_WAVE).min(n_blocks))
            .into_par_iter()
            .map(|blk| {
                let mut entries: Vec<(usize, f64, f64)> = Vec::new();
                let mut unmapped = 0;
                for y in blk * BLOCK_ROWS..((blk + 1) * BLOCK_ROWS).min(h) {
                    let row = &samples[y * w..(y + 1) * w];
                    for (x, &v) in row.iter().enumerate() {
                        let Ok(p) = map.scan_to_screen([x as f64 + 0.5, y as f64 + 0.5]) else {
                            unmapped += 1;
                            continue;
                        };
                        let (ux, uy) = (p[0] * n, p[1] * n);
                        let (fa, fb) = (ux.floor(), uy.floor());
                        let ia = fa as i64 - a0;
                        let ib = fb as i64 - b0;
                        if ia < 0 || ib < 0 || ia as usize >= gw || ib as usize >= gh {
                            unmapped += 1;
                            continue;
                        }
                        let dx = ux - fa - 0.5;
                        let dy = uy - fb - 0.5;
                        let wt = (1.0 - 2.0 * dx.abs()) * (1.0 - 2.0 * dy.abs());
                        let idx = ib as usize * gw + ia as usize;
                        let wl = wt * v as f64;
                        match entries.last_mut() {
                            Some(e) if e.0 == idx => {
                                e.1 += wt;
                                e.2 += wl;
                            }
                            _ => entries.push((idx, wt, wl)),
                        }
                    }
                }
                BlockSum { entries, unmapped }
            })
            .collect();
        for part in parts {
            unmapped += part.unmapped;
            for (idx, wt, wl) in part.entries {
                weights[idx] += wt;
                sums[idx] += wl;
            }
        }
    }

    let ppp = map.pixels_per_patch(pattern);
    let min_weight = 0.5 * 0.25 * ppp * ppp;

    // Trim to the sites that received enough kernel mass.
    let (mut i0, mut j0, mut i1, mut j1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for j in 0..gh {
        for i in 0..gw {
            if weights[j * gw + i] >= min_weight {
                i0 = i0.min(i);
                j0 = j0.min(j);
                i1 = i1.max(i);
                j1 = j1.max(j);
            }
        }
    }
    if i0 == usize::MAX {
        return Err(RenderError::EmptyOverlap);
    }
    let (tw, th) = (i1 - i0 + 1, j1 - j0 + 1);
    let origin = [a0 + i0 as i64, b0 + j0 as i64];
    let mut t_sums = Vec::with_capacity(tw * th);
    let mut t_weights = Vec::with_capacity(tw * th);
    for j in j0..=j1 {
        t_sums.extend_from_slice(&sums[j * gw + i0..=j * gw + i1]);
        t_weights.extend_from_slice(&weights[j * gw + i0..=j * gw + i1]);
    }

    let mut grid = PatchGrid {
        width: tw,
        height: th,
        sites_per_tile: pattern.sites_per_tile(),
        origin,
        classes: site_classes(pattern, origin, tw, th),
        sums: t_sums,
        weights: t_weights,
        inside: Vec::new(),
        min_weight,
        unmapped_pixels: unmapped,
        patch_ppi: 25.4 / pattern.patch_pitch_mm(),
    };
    let mut inside = Vec::with_capacity(tw * th);
    for j in 0..th {
        for i in 0..tw {
            inside.push(matches!(
                map.screen_to_scan(grid.site_center(i, j)),
                Ok(q) if q[0] >= 0.0 && q[1] >= 0.0 && q[0] < w as f64 && q[1] < h as f64
            ));
        }
    }
    grid.inside = inside;
    Ok(grid)
}

/// Bounding box, in site units, of the scan boundary mapped to the screen.
fn footprint(map: &RegistrationMap, w: usize, h: usize, n: f64) -> Option<(Point, Point)> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut visit = |x: f64, y: f64| {
        if let Ok(p) = map.scan_to_screen([x, y]) {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k] * n);
                hi[k] = hi[k].max(p[k] * n);
            }
        }
    };
    for x in 0..=w {
        visit(x as f64, 0.0);
        visit(x as f64, h as f64);
    }
    for y in 0..=h {
        visit(0.0, y as f64);
        visit(w as f64, y as f64);
    }
    lo[0].is_finite().then_some((lo, hi))
}
