//! Registration-mark strips: periodic disks along the top and bottom edges.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RegistrationError;
use crate::geometry::Point;
use crate::raster::{LinearRaster, SourceTag};
use crate::screen::{MarkLayout, ScreenPattern};

/// Normalized cross-correlation a disk must reach.
pub const MARK_THRESHOLD: f64 = 0.6;
/// Fewer disks than this in a strip and the strip is ignored.
pub const MIN_DISKS_PER_STRIP: usize = 3;
/// Disks further than this from their strip's fitted line are dropped.
const MAX_STRIP_RESIDUAL_PX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strip {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkMatch {
    pub scan: Point,
    pub screen: Point,
    pub strip: Strip,
    /// Disk index along the strip.
    pub index: i64,
    pub correlation: f64,
}

/// Disk-on-ground template sampled at pixel offsets within 1.5 radii.
struct Template {
    offsets: Vec<(i64, i64, f64)>,
    reach: i64,
}

impl Template {
    fn disk(radius: f64) -> Self {
        let reach = (1.5 * radius).ceil() as i64;
        let mut offsets = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let r = ((dx * dx + dy * dy) as f64).sqrt();
                if r <= 1.5 * radius {
                    // Pixel coverage of the disk, linear across the edge.
                    let v = (radius - r + 0.5).clamp(0.0, 1.0);
                    offsets.push((dx, dy, v));
                }
            }
        }
        let mean = offsets.iter().map(|o| o.2).sum::<f64>() / offsets.len() as f64;
        let norm = offsets.iter().map(|o| (o.2 - mean).powi(2)).sum::<f64>().sqrt();
        for o in offsets.iter_mut() {
            o.2 = (o.2 - mean) / norm;
        }
        Self { offsets, reach }
    }

    /// Normalized cross-correlation at pixel `(x, y)`.
    fn ncc(&self, img: &[f64], w: usize, x: i64, y: i64) -> f64 {
        let (mut s, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &(dx, dy, t) in &self.offsets {
            let v = img[(y + dy) as usize * w + (x + dx) as usize];
            s += t * v;
            s1 += v;
            s2 += v * v;
        }
        let m = self.offsets.len() as f64;
        let var = s2 - s1 * s1 / m;
        if var <= 1e-18 {
            0.0
        } else {
            s / var.sqrt()
        }
    }
}

/// Detected centres in one horizontal band, with correlation scores.
fn detect_band(
    img: &[f64],
    w: usize,
    h: usize,
    rows: (usize, usize),
    layout: &MarkLayout,
    period_px: f64,
) -> Vec<(Point, f64)> {
    let radius = layout.disk_radius * period_px;
    let tpl = Template::disk(radius);
    let reach = tpl.reach;
    let (y_lo, y_hi) = (rows.0 as i64 + reach, (rows.1 as i64).min(h as i64 - reach));
    let (x_lo, x_hi) = (reach, w as i64 - reach);
    if y_lo >= y_hi || x_lo >= x_hi {
        return Vec::new();
    }
    let bw = (x_hi - x_lo) as usize;
    let scores: Vec<f64> = (y_lo..y_hi)
        .into_par_iter()
        .flat_map_iter(|y| (x_lo..x_hi).map(move |x| (x, y)))
        .map(|(x, y)| tpl.ncc(img, w, x, y))
        .collect();
    let at = |x: i64, y: i64| scores[(y - y_lo) as usize * bw + (x - x_lo) as usize];

    // Local maxima over a neighbourhood of half the disk spacing.
    let nms = (0.5 * layout.disk_period * period_px).floor().max(1.0) as i64;
    let mut found = Vec::new();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let s = at(x, y);
            if s < MARK_THRESHOLD {
                continue;
            }
            let mut is_max = true;
            'n: for yy in (y - nms).max(y_lo)..=(y + nms).min(y_hi - 1) {
                for xx in (x - nms).max(x_lo)..=(x + nms).min(x_hi - 1) {
                    let o = at(xx, yy);
                    if o > s || (o == s && (yy, xx) < (y, x)) {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                found.push(([x as f64 + 0.5, y as f64 + 0.5], s));
            }
        }
    }
    found
        .into_iter()
        .filter_map(|(c, s)| centroid(img, w, h, c, radius).map(|c| (c, s)))
        .collect()
}

/// Centroid of disk coverage around `c`. Coverage saturates at half the
/// disk contrast, so smooth shading inside the disk does not pull it.
fn centroid(img: &[f64], w: usize, h: usize, c: Point, radius: f64) -> Option<Point> {
    let mut c = c;
    for _ in 0..4 {
        let reach = (1.8 * radius).ceil() as i64;
        let (cx, cy) = (c[0].floor() as i64, c[1].floor() as i64);
        if cx - reach < 0 || cy - reach < 0 || cx + reach >= w as i64 || cy + reach >= h as i64 {
            return None;
        }
        let mut ground = Vec::new();
        let mut inner = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx + dx, cy + dy);
                let r = (x as f64 + 0.5 - c[0]).hypot(y as f64 + 0.5 - c[1]);
                let v = img[y as usize * w + x as usize];
                if r >= 1.3 * radius && r <= 1.8 * radius {
                    ground.push(v);
                } else if r <= 0.6 * radius {
                    inner.push(v);
                }
            }
        }
        let g = crate::geometry::median(&mut ground);
        let d = crate::geometry::median(&mut inner);
        if !(d > g) {
            return None;
        }
        let half = 0.5 * (d - g);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx + dx, cy + dy);
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - c[0]).hypot(py - c[1]) > 1.25 * radius {
                    continue;
                }
                let v = img[y as usize * w + x as usize];
                let wt = ((v - g) / half).clamp(0.0, 1.0);
                sw += wt;
                sx += wt * px;
                sy += wt * py;
            }
        }
        // A disk clipped by an edge covers too little.
        let area = std::f64::consts::PI * radius * radius;
        if !(sw > 0.85 * area && sw < 1.3 * area) {
            return None;
        }
        c = [sx / sw, sy / sw];
    }
    Some(c)
}

/// A strip's disks sorted along the strip with integer indices from the
/// first one, plus the fitted origin, unit direction and spacing.
struct StripFit {
    disks: Vec<(Point, f64, i64)>,
    origin: Point,
    dir: Point,
    spacing: f64,
}

fn fit_strip(mut found: Vec<(Point, f64)>, nominal_spacing: f64) -> Option<StripFit> {
    if found.len() < MIN_DISKS_PER_STRIP {
        return None;
    }
    found.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
    // Direction from the end points, indices from the nominal spacing.
    let (first, last) = (found[0].0, found[found.len() - 1].0);
    let len = (last[0] - first[0]).hypot(last[1] - first[1]);
    if !(len > 0.0) {
        return None;
    }
    let mut dir = [(last[0] - first[0]) / len, (last[1] - first[1]) / len];
    let mut origin = first;
    let mut spacing = nominal_spacing;
    let mut disks: Vec<(Point, f64, i64)> = Vec::new();
    for _ in 0..3 {
        disks = found
            .iter()
            .filter_map(|&(q, s)| {
                let t = ((q[0] - origin[0]) * dir[0] + (q[1] - origin[1]) * dir[1]) / spacing;
                let k = t.round();
                ((t - k).abs() < 0.25).then_some((q, s, k as i64))
            })
            .collect();
        if disks.len() < MIN_DISKS_PER_STRIP {
            return None;
        }
        // Least squares q = o + k · v over both coordinates.
        let m = disks.len() as f64;
        let (mut sk, mut skk) = (0.0, 0.0);
        let (mut sq, mut skq) = ([0.0; 2], [0.0; 2]);
        for (q, _, k) in &disks {
            let k = *k as f64;
            sk += k;
            skk += k * k;
            for a in 0..2 {
                sq[a] += q[a];
                skq[a] += k * q[a];
            }
        }
        let det = m * skk - sk * sk;
        if det.abs() < 1e-9 {
            return None;
        }
        let mut v = [0.0; 2];
        for a in 0..2 {
            v[a] = (m * skq[a] - sk * sq[a]) / det;
            origin[a] = (sq[a] - v[a] * sk) / m;
        }
        spacing = v[0].hypot(v[1]);
        dir = [v[0] / spacing, v[1] / spacing];
        // Drop disks far off the fitted line before the next round.
        let off = |q: &Point, k: i64| {
            let k = k as f64;
            (q[0] - origin[0] - k * v[0]).hypot(q[1] - origin[1] - k * v[1])
        };
        let keep: Vec<(Point, f64)> = disks
            .iter()
            .filter(|(q, _, k)| off(q, *k) < MAX_STRIP_RESIDUAL_PX)
            .map(|&(q, s, _)| (q, s))
            .collect();
        if keep.len() < MIN_DISKS_PER_STRIP {
            return None;
        }
        found = keep;
    }
    Some(StripFit {
        disks,
        origin,
        dir,
        spacing,
    })
}

/// Finds mark disks near the top and bottom edges and pairs each with its
/// screen position. Top disk `k` sits at `((k + 0.5) · period, strip / 2)`
/// counting from the leftmost detected disk. The bottom strip's row is
/// snapped assuming the plate is a whole number of tiles tall.
pub fn detect_registration_marks(
    raster: &LinearRaster,
    pattern: &ScreenPattern,
) -> Result<Vec<MarkMatch>, RegistrationError> {
    let Some(spec) = pattern.marks() else {
        return Err(RegistrationError::NoMarksSpec);
    };
    if raster.channels() != 1 {
        return Err(RegistrationError::NotMono(raster.channels()));
    }
    let layout = spec.layout(pattern.tile_period_mm());
    let period_px = raster.ppi() / 25.4 * pattern.tile_period_mm();
    let (w, h) = (raster.width(), raster.height());
    // Disks are bright on a positive and dark on a negative.
    let sign = if raster.source_tag() == SourceTag::Negative { -1.0 } else { 1.0 };
    let img: Vec<f64> = raster.samples().iter().map(|&v| sign * v as f64).collect();

    let band = ((3.0 * layout.strip_width * period_px).ceil() as usize).min(h / 3);
    let top = detect_band(&img, w, h, (0, band), &layout, period_px);
    let bottom = detect_band(&img, w, h, (h - band, h), &layout, period_px);
    let spacing = layout.disk_period * period_px;
    let top = fit_strip(top, spacing);
    let bottom = fit_strip(bottom, spacing);

    let mut out = Vec::new();
    let screen_top = |k: i64| [(k as f64 + 0.5) * layout.disk_period, 0.5 * layout.strip_width];
    match (&top, &bottom) {
        (Some(t), _) => {
            for &(q, s, k) in &t.disks {
                out.push(MarkMatch {
                    scan: q,
                    screen: screen_top(k),
                    strip: Strip::Top,
                    index: k,
                    correlation: s,
                });
            }
            if let Some(b) = &bottom {
                let normal = [-t.dir[1], t.dir[0]];
                let tile_px = t.spacing / layout.disk_period;
                let mut depth = 0.0;
                for (q, _, _) in &b.disks {
                    depth += (q[0] - t.origin[0]) * normal[0] + (q[1] - t.origin[1]) * normal[1];
                }
                let rows = depth / b.disks.len() as f64 / tile_px;
                let y = (rows + layout.strip_width).round() - 0.5 * layout.strip_width;
                for &(q, s, _) in &b.disks {
                    let along = ((q[0] - t.origin[0]) * t.dir[0] + (q[1] - t.origin[1]) * t.dir[1]) / t.spacing;
                    let k = along.round() as i64;
                    out.push(MarkMatch {
                        scan: q,
                        screen: [(k as f64 + 0.5) * layout.disk_period, y],
                        strip: Strip::Bottom,
                        index: k,
                        correlation: s,
                    });
                }
            }
        }
        (None, Some(b)) => {
            for &(q, s, k) in &b.disks {
                out.push(MarkMatch {
                    scan: q,
                    screen: [(k as f64 + 0.5) * layout.disk_period, -0.5 * layout.strip_width],
                    strip: Strip::Bottom,
                    index: k,
                    correlation: s,
                });
            }
        }
        (None, None) => {}
    }
    Ok(out)
}
