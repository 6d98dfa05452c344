//! Colour separation score of a candidate registration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{FastInverse, RegistrationMap};
use crate::raster::{LinearRaster, Rect};
use crate::screen::ScreenPattern;

/// Site offsets compared, and whether they are in sites (neighbours) or
/// in tiles.
const NEIGHBOURS: [(i64, i64, bool); 6] = [
    (1, 0, true),
    (0, 1, true),
    (1, 1, true),
    (1, -1, true),
    (1, 0, false),
    (0, 1, false),
];

/// Per-window statistics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window: Rect,
    /// Between-class variance of class means over mean within-class variance.
    pub score: f64,
    pub patches: usize,
}

/// Default windows: a 3×3 grid of squares of side `side` spread over the
/// image inside a border margin of `margin` (fraction of each dimension).
/// Squares shrink to fit small images.
pub fn default_windows(width: usize, height: usize, side: usize, margin: f64) -> Vec<Rect> {
    let mx = (width as f64 * margin).round() as usize;
    let my = (height as f64 * margin).round() as usize;
    let uw = width.saturating_sub(2 * mx);
    let uh = height.saturating_sub(2 * my);
    let s = side.min(uw / 3).min(uh / 3).max(1);
    let mut out = Vec::with_capacity(9);
    for j in 0..3 {
        for i in 0..3 {
            let cx = mx as f64 + uw as f64 * (i as f64 + 0.5) / 3.0;
            let cy = my as f64 + uh as f64 * (j as f64 + 0.5) / 3.0;
            let x = (cx - 0.5 * s as f64).round().max(0.0) as usize;
            let y = (cy - 0.5 * s as f64).round().max(0.0) as usize;
            out.push(Rect::new(x.min(width - s), y.min(height - s), s, s));
        }
    }
    out
}

/// Fisher-style separation score for one window, sampling every
/// `stride`-th pixel along each axis.
pub fn window_score(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    map: &RegistrationMap,
    window: Rect,
    stride: usize,
) -> WindowScore {
    score_with(mono, pattern, map, &FastInverse::new(map), window, stride)
}

fn score_with(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    map: &RegistrationMap,
    fast: &FastInverse,
    window: Rect,
    stride: usize,
) -> WindowScore {
    let empty = WindowScore {
        window,
        score: 0.0,
        patches: 0,
    };
    let n = pattern.sites_per_tile() as f64;
    let stride = stride.max(1);

    // Site bounding box of the window.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let (x0, y0) = (window.x as f64, window.y as f64);
    let (x1, y1) = (x0 + window.w as f64, y0 + window.h as f64);
    for k in 0..=8 {
        let t = k as f64 / 8.0;
        for q in [
            [x0 + t * (x1 - x0), y0],
            [x0 + t * (x1 - x0), y1],
            [x0, y0 + t * (y1 - y0)],
            [x1, y0 + t * (y1 - y0)],
        ] {
            if let Ok(p) = map.scan_to_screen(q) {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a] * n);
                    hi[a] = hi[a].max(p[a] * n);
                }
            }
        }
    }
    if !lo[0].is_finite() {
        return empty;
    }
    let a0 = lo[0].floor() as i64 - 1;
    let b0 = lo[1].floor() as i64 - 1;
    let gw = (hi[0].ceil() as i64 + 1 - a0) as usize;
    let gh = (hi[1].ceil() as i64 + 1 - b0) as usize;
    if gw * gh > 4 * window.area() + 64 {
        return empty;
    }
    let mut sums = vec![0.0f64; gw * gh];
    let mut weights = vec![0.0f64; gw * gh];

    // Patch weights fall to zero over the pixel nearest each patch edge
    // and are flat inside, so misregistration mixes neighbours in at first
    // order.
    let ppp_full = map.period_px() / n;
    let ramp = ppp_full.max(1.0);
    let edge = |d: f64| ((0.5 - d.abs()) * ramp).min(1.0);
    let w = mono.width();
    let samples = mono.samples();
    let (a0f, b0f) = (a0 as f64, b0 as f64);
    for y in (window.y..window.y + window.h).step_by(stride) {
        let row = &samples[y * w..(y + 1) * w];
        for x in (window.x..window.x + window.w).step_by(stride) {
            let Some(p) = fast.apply(map, [x as f64 + 0.5, y as f64 + 0.5]) else {
                continue;
            };
            let (ux, uy) = (p[0] * n - a0f, p[1] * n - b0f);
            if !(ux >= 0.0 && uy >= 0.0) {
                continue;
            }
            let (ia, ib) = (ux as usize, uy as usize);
            if ia >= gw || ib >= gh {
                continue;
            }
            let wt = edge(ux - ia as f64 - 0.5) * edge(uy - ib as f64 - 0.5);
            let idx = ib * gw + ia;
            weights[idx] += wt;
            sums[idx] += wt * row[x] as f64;
        }
    }

    // Sites fade in between half and full coverage, so the score stays
    // continuous as patches cross the window border.
    let full = ((ppp_full - 1.0).max(0.5) / stride as f64).powi(2);
    let mut omega = vec![0.0f64; gw * gh];
    let mut value = vec![0.0f64; gw * gh];
    let mut patches = 0;
    for k in 0..gw * gh {
        let o = (2.0 * (weights[k] / full - 0.5)).clamp(0.0, 1.0);
        if o > 0.0 {
            omega[k] = o;
            value[k] = sums[k] / weights[k];
            patches += 1;
        }
    }

    // Mean squared difference of neighbouring patches of different class
    // over that of same-class patches among the neighbours or one tile
    // apart. Diagonal neighbours make the score depend on which site holds
    // which class. Each difference is taken symmetrically, so a smooth
    // scene gradient does not favour either direction of misregistration.
    let nt = pattern.sites_per_tile();
    let class = |i: usize, j: usize| pattern.site_class(a0 + i as i64, b0 + j as i64);
    let (mut between, mut wb, mut within, mut ww) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..gh {
        for i in 0..gw {
            let k = j * gw + i;
            if omega[k] == 0.0 {
                continue;
            }
            let c = class(i, j);
            for (di, dj, adjacent) in NEIGHBOURS {
                if nt == 1 && !adjacent {
                    continue;
                }
                let (di, dj) = if adjacent { (di, dj) } else { (di * nt as i64, dj * nt as i64) };
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || jj < 0 || ii >= gw as i64 || jj >= gh as i64 {
                    continue;
                }
                let (ii, jj) = (ii as usize, jj as usize);
                let kk = jj * gw + ii;
                if omega[kk] == 0.0 {
                    continue;
                }
                let wt = omega[k] * omega[kk];
                let d2 = (value[k] - value[kk]).powi(2);
                if class(ii, jj) == c {
                    within += wt * d2;
                    ww += wt;
                } else if adjacent {
                    between += wt * d2;
                    wb += wt;
                }
            }
        }
    }
    if wb < 2.0 || ww < 2.0 {
        return WindowScore { patches, ..empty };
    }
    let (between, within) = (between / wb, within / ww);
    let score = between / (within + 1e-12 * (between + within) + f64::MIN_POSITIVE);
    WindowScore {
        window,
        score,
        patches,
    }
}

/// Mean window score. Windows are scored in parallel and combined in order.
pub fn separation_score(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    map: &RegistrationMap,
    windows: &[Rect],
    stride: usize,
) -> f64 {
    if windows.is_empty() {
        return 0.0;
    }
    let fast = FastInverse::new(map);
    let scores: Vec<f64> = windows
        .par_iter()
        .map(|w| score_with(mono, pattern, map, &fast, *w, stride).score)
        .collect();
    scores.iter().sum::<f64>() / windows.len() as f64
}
