//! Automatic registration: a seed from marks or the spectrum, a search over
//! rotation candidates and lattice phase, then simplex refinement.

use std::fmt::Write as _;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::coarse::{coarse_estimate, CoarseEstimate};
use super::marks::{detect_registration_marks, MarkMatch, Strip};
use super::objective::{separation_score, window_score, WindowScore};
use super::refine::{refine_registration_with, validate_windows, windows_for, RefineOptions, RefineOutcome};
use super::RegistrationError;
use crate::geometry::{fit_map, DecomposedParams, Point, RegistrationMap, ScanFrame};
use crate::raster::{LinearRaster, Rect};
use crate::screen::ScreenPattern;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoOptions {
    /// Scan resolution assumed by the spectral seed; the raster's own when unset.
    pub nominal_ppi: Option<f64>,
    /// Seed from registration marks when the pattern has them.
    pub use_marks: bool,
    /// Objective windows; empty selects the default grid.
    pub windows: Vec<Rect>,
    pub refine: RefineOptions,
}

impl Default for AutoOptions {
    fn default() -> Self {
        Self {
            nominal_ppi: None,
            use_marks: true,
            windows: Vec::new(),
            refine: RefineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Marks,
    Spectrum,
}

/// One rotation hypothesis and its best lattice phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub rotation_deg: f64,
    /// Screen quarter turns applied to the seed.
    pub quarter_turns: u8,
    /// Best phase shift in tiles.
    pub shift: Point,
    pub grid_score: f64,
    /// Score after a short refinement, when several candidates competed.
    pub refined_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub seed: SeedSource,
    pub coarse: Option<CoarseEstimate>,
    pub marks: Vec<MarkMatch>,
    pub mark_fit_rms_px: Option<f64>,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    pub initial_score: f64,
    pub final_score: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    /// Per-window scores of the final map.
    pub residuals: Vec<WindowScore>,
    pub params: DecomposedParams,
}

#[derive(Debug, Clone)]
pub struct AutoRegistration {
    pub map: RegistrationMap,
    pub report: RegistrationReport,
}

/// Phase steps per tile along each axis: half a site.
fn phase_steps(pattern: &ScreenPattern) -> usize {
    2 * pattern.sites_per_tile()
}

/// Least-squares similarity through `(screen, scan)` pairs; works for
/// collinear points such as a single mark strip.
fn fit_similarity(pairs: &[(Point, Point)], frame: ScanFrame) -> Option<RegistrationMap> {
    if pairs.len() < 2 {
        return None;
    }
    let m = pairs.len() as f64;
    let mut ps = [0.0; 2];
    let mut qs = [0.0; 2];
    for (p, q) in pairs {
        for a in 0..2 {
            ps[a] += p[a] / m;
            qs[a] += q[a] / m;
        }
    }
    // q - q̄ = [[a, -b], [b, a]] (p - p̄).
    let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
    for (p, q) in pairs {
        let (x, y) = (p[0] - ps[0], p[1] - ps[1]);
        let (u, v) = (q[0] - qs[0], q[1] - qs[1]);
        num_a += x * u + y * v;
        num_b += x * v - y * u;
        den += x * x + y * y;
    }
    if !(den > 0.0) {
        return None;
    }
    let (a, b) = (num_a / den, num_b / den);
    let t = [qs[0] - (a * ps[0] - b * ps[1]), qs[1] - (b * ps[0] + a * ps[1])];
    let h = Matrix3::new(a, -b, t[0], b, a, t[1], 0.0, 0.0, 1.0);
    RegistrationMap::identity(frame).with_homography(h).ok()
}

/// Seed map from registration marks, when enough are found.
fn seed_from_marks(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
) -> Result<Option<(RegistrationMap, Vec<MarkMatch>, f64)>, RegistrationError> {
    let marks = detect_registration_marks(mono, pattern)?;
    if marks.is_empty() {
        return Ok(None);
    }
    let frame = ScanFrame::of(mono);
    let pairs: Vec<(Point, Point)> = marks.iter().map(|m| (m.screen, m.scan)).collect();
    let both = marks.iter().any(|m| m.strip == Strip::Top) && marks.iter().any(|m| m.strip == Strip::Bottom);
    let map = if both {
        fit_map(&pairs, false, frame).ok().map(|f| f.map)
    } else {
        None
    };
    let Some(map) = map.or_else(|| fit_similarity(&pairs, frame)) else {
        return Ok(None);
    };
    let mut sq = 0.0;
    for (p, q) in &pairs {
        let r = map.screen_to_scan(*p)?;
        sq += (r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2);
    }
    let rms = (sq / pairs.len() as f64).sqrt();
    Ok(Some((map, marks, rms)))
}

/// Default window grid restricted to the rows between the mark strips,
/// so the strong disk edges stay out of the objective.
fn windows_between_strips(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    map: &RegistrationMap,
    marks: &[MarkMatch],
) -> Option<Vec<Rect>> {
    let layout = pattern.marks()?.layout(pattern.tile_period_mm());
    let (w, h) = (mono.width() as f64, mono.height() as f64);
    let clear = layout.strip_width + 1.0;
    let edge_rows = |screen_y: f64| -> Option<[f64; 2]> {
        let mut ys = [f64::INFINITY, f64::NEG_INFINITY];
        for x in [0.0, 0.5 * w, w] {
            for y in [0.0, h] {
                // Scan row where the screen row crosses this column.
                let p = map.scan_to_screen([x, y]).ok()?;
                let q = map.screen_to_scan([p[0], screen_y]).ok()?;
                ys = [ys[0].min(q[1]), ys[1].max(q[1])];
            }
        }
        Some(ys)
    };
    let mut top = 0.0;
    let mut bottom = h;
    if let Some(m) = marks.iter().find(|m| m.strip == Strip::Top) {
        let y0 = m.screen[1] - 0.5 * layout.strip_width;
        top = edge_rows(y0 + clear)?[1];
    }
    if let Some(m) = marks.iter().find(|m| m.strip == Strip::Bottom) {
        let y1 = m.screen[1] + 0.5 * layout.strip_width;
        bottom = edge_rows(y1 - clear)?[0];
    }
    let (top, bottom) = (top.clamp(0.0, h).ceil() as usize, bottom.clamp(0.0, h).floor() as usize);
    if bottom <= top + 48 {
        return None;
    }
    let grid = super::objective::default_windows(mono.width(), bottom - top, super::DEFAULT_WINDOW_SIDE, super::DEFAULT_WINDOW_MARGIN);
    Some(grid.into_iter().map(|r| Rect::new(r.x, r.y + top, r.w, r.h)).collect())
}

/// Seed map composed with a screen-space quarter turn and shift.
fn compose(seed: &RegistrationMap, quarter_turns: u8, shift: Point) -> Result<RegistrationMap, RegistrationError> {
    let (c, s) = match quarter_turns % 4 {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        _ => (0.0, -1.0),
    };
    let t = Matrix3::new(c, -s, shift[0], s, c, shift[1], 0.0, 0.0, 1.0);
    Ok(seed.with_homography(seed.homography() * t)?)
}

fn wrap180(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Representative quarter-turn counts: one per class of rotations that
/// relabeling symmetries make indistinguishable, the smallest resulting
/// rotation in each.
fn rotation_candidates(pattern: &ScreenPattern, seed_rotation: f64, step_quarters: u8) -> Vec<(u8, f64)> {
    let turns: Vec<u8> = pattern.relabel_symmetries().iter().map(|s| s.quarter_turns % 4).collect();
    let mut classes: Vec<Vec<u8>> = Vec::new();
    for k in (0..4u8).step_by(step_quarters.max(1) as usize) {
        match classes
            .iter_mut()
            .find(|c| turns.contains(&((k + 4 - c[0]) % 4)))
        {
            Some(c) => c.push(k),
            None => classes.push(vec![k]),
        }
    }
    let mut out: Vec<(u8, f64)> = classes
        .iter()
        .map(|c| {
            c.iter()
                .map(|&k| (k, wrap180(seed_rotation + 90.0 * k as f64)))
                .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0)))
                .expect("class is non-empty")
        })
        .collect();
    out.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0)));
    out
}

/// Registers a mono scan against `pattern` without an initial map.
pub fn auto_register(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    options: &AutoOptions,
) -> Result<AutoRegistration, RegistrationError> {
    if mono.channels() != 1 {
        return Err(RegistrationError::NotMono(mono.channels()));
    }
    let windows = if options.windows.is_empty() {
        windows_for(mono)
    } else {
        options.windows.clone()
    };

    // Seed.
    let frame = ScanFrame::of(mono);
    let marks_seed = if options.use_marks && pattern.marks().is_some() {
        seed_from_marks(mono, pattern)?
    } else {
        None
    };
    let windows = match (&marks_seed, options.windows.is_empty()) {
        (Some((map, marks, _)), true) => windows_between_strips(mono, pattern, map, marks).unwrap_or(windows),
        _ => windows,
    };
    validate_windows(mono, &windows)?;
    let (seed_source, seed, coarse, marks, mark_rms, step_quarters) = match marks_seed {
        // Marks fix the lattice up to a half turn of the plate.
        Some((map, marks, rms)) => (SeedSource::Marks, map, None, marks, Some(rms), 2u8),
        None => {
            let ppi = options.nominal_ppi.unwrap_or(mono.ppi());
            let c = coarse_estimate(mono, pattern, ppi)?;
            let map = RegistrationMap::similarity(frame, c.period_px, c.rotation_deg, c.phase_px)?;
            let step = (c.ambiguity_deg / 90.0).round().clamp(1.0, 2.0) as u8;
            (SeedSource::Spectrum, map, Some(c), Vec::new(), None, step)
        }
    };
    let seed_rotation = DecomposedParams::from_map(&seed).rotation_deg;

    // Phase grid for each rotation candidate, scored cheaply.
    let steps = phase_steps(pattern);
    let grid_stride = options.refine.first_pass_stride.max(options.refine.stride).max(2);
    let mut candidates = Vec::new();
    let mut maps = Vec::new();
    for (k, rotation) in rotation_candidates(pattern, seed_rotation, step_quarters) {
        let mut best: Option<(f64, Point, RegistrationMap)> = None;
        for j in 0..steps {
            for i in 0..steps {
                let shift = [i as f64 / steps as f64, j as f64 / steps as f64];
                let m = compose(&seed, k, shift)?;
                let s = separation_score(mono, pattern, &m, &windows, grid_stride);
                if best.as_ref().is_none_or(|b| s > b.0) {
                    best = Some((s, shift, m));
                }
            }
        }
        let (grid_score, shift, m) = best.expect("phase grid is non-empty");
        candidates.push(Candidate {
            rotation_deg: rotation,
            quarter_turns: k,
            shift,
            grid_score,
            refined_score: None,
        });
        maps.push(m);
    }

    // Short refinement to rank competing candidates.
    let mut chosen = 0;
    if candidates.len() > 1 {
        let quick = RefineOptions {
            max_iterations: 150,
            tolerance: 1e-4,
            stride: grid_stride,
            first_pass_stride: 0,
            refine_distortion: false,
            ..options.refine
        };
        let mut best = f64::NEG_INFINITY;
        for (i, (c, m)) in candidates.iter_mut().zip(maps.iter_mut()).enumerate() {
            let out = unwrap_outcome(refine_registration_with(mono, pattern, m, &windows, &quick))?;
            c.refined_score = Some(out.score);
            *m = out.map;
            // Candidates are ordered by rotation magnitude, so ties keep the smaller.
            if out.score > best {
                best = out.score;
                chosen = i;
            }
        }
    }

    let outcome = unwrap_outcome(refine_registration_with(mono, pattern, &maps[chosen], &windows, &options.refine))?;
    let residuals = windows
        .iter()
        .map(|w| window_score(mono, pattern, &outcome.map, *w, options.refine.stride))
        .collect();
    let report = RegistrationReport {
        seed: seed_source,
        coarse,
        marks,
        mark_fit_rms_px: mark_rms,
        candidates,
        chosen,
        initial_score: outcome.initial_score,
        final_score: outcome.score,
        iterations: outcome.iterations,
        converged: outcome.converged,
        trace: outcome.trace.clone(),
        residuals,
        params: DecomposedParams::from_map(&outcome.map),
    };
    Ok(AutoRegistration {
        map: outcome.map,
        report,
    })
}

/// Accepts an unconverged refinement; the report flags it.
fn unwrap_outcome(r: Result<RefineOutcome, RegistrationError>) -> Result<RefineOutcome, RegistrationError> {
    match r {
        Ok(o) => Ok(o),
        Err(RegistrationError::NotConverged(o)) => Ok(*o),
        Err(e) => Err(e),
    }
}

impl RegistrationReport {
    /// Structured text: `[section]` headers, `key = value` lines and
    /// whitespace-separated tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seed = match self.seed {
            SeedSource::Marks => "marks",
            SeedSource::Spectrum => "spectrum",
        };
        let _ = writeln!(s, "[registration]");
        let _ = writeln!(s, "seed = {seed}");
        let _ = writeln!(s, "converged = {}", self.converged);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "initial_score = {:.6}", self.initial_score);
        let _ = writeln!(s, "final_score = {:.6}", self.final_score);
        let p = &self.params;
        let _ = writeln!(s, "rotation_deg = {:.6}", p.rotation_deg);
        let _ = writeln!(s, "period_px = {:.6}", (p.scale_x * p.scale_y).abs().sqrt());
        let _ = writeln!(s, "dx = {:.4}", p.dx);
        let _ = writeln!(s, "dy = {:.4}", p.dy);
        let _ = writeln!(s, "skew = {:.6}", p.shear);
        let _ = writeln!(s, "k1 = {:.6e}", p.k1);

        if let Some(c) = &self.coarse {
            let _ = writeln!(s, "\n[coarse]");
            let _ = writeln!(s, "period_px = {:.6}", c.period_px);
            let _ = writeln!(s, "rotation_deg = {:.6}", c.rotation_deg);
            let _ = writeln!(s, "phase_px = {:.4} {:.4}", c.phase_px[0], c.phase_px[1]);
            let _ = writeln!(s, "confidence = {:.4}", c.confidence);
            let _ = writeln!(s, "peak_ratio = {:.3}", c.peak_ratio);
            let _ = writeln!(s, "ambiguity_deg = {}", c.ambiguity_deg);
            let _ = writeln!(s, "\n[peaks]");
            let _ = writeln!(s, "h k fx fy amplitude phase");
            for pk in &c.peaks {
                let _ = writeln!(
                    s,
                    "{} {} {:.6} {:.6} {:.6} {:.4}",
                    pk.harmonic[0], pk.harmonic[1], pk.frequency[0], pk.frequency[1], pk.amplitude, pk.phase
                );
            }
        }
        if !self.marks.is_empty() {
            let _ = writeln!(s, "\n[marks]");
            let _ = writeln!(s, "count = {}", self.marks.len());
            if let Some(r) = self.mark_fit_rms_px {
                let _ = writeln!(s, "fit_rms_px = {r:.4}");
            }
            let _ = writeln!(s, "strip index scan_x scan_y screen_x screen_y correlation");
            for m in &self.marks {
                let strip = match m.strip {
                    Strip::Top => "top",
                    Strip::Bottom => "bottom",
                };
                let _ = writeln!(
                    s,
                    "{strip} {} {:.3} {:.3} {:.3} {:.3} {:.4}",
                    m.index, m.scan[0], m.scan[1], m.screen[0], m.screen[1], m.correlation
                );
            }
        }
        let _ = writeln!(s, "\n[candidates]");
        let _ = writeln!(s, "rotation_deg quarter_turns shift_x shift_y grid_score refined_score chosen");
        for (i, c) in self.candidates.iter().enumerate() {
            let refined = c.refined_score.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{:.4} {} {:.4} {:.4} {:.6} {refined} {}",
                c.rotation_deg,
                c.quarter_turns,
                c.shift[0],
                c.shift[1],
                c.grid_score,
                i == self.chosen
            );
        }
        let _ = writeln!(s, "\n[trace]");
        let _ = writeln!(s, "iteration score");
        for (i, v) in self.trace.iter().enumerate() {
            let _ = writeln!(s, "{} {:.6}", i + 1, v);
        }
        let _ = writeln!(s, "\n[residuals]");
        let _ = writeln!(s, "x y w h score patches");
        for r in &self.residuals {
            let _ = writeln!(
                s,
                "{} {} {} {} {:.6} {}",
                r.window.x, r.window.y, r.window.w, r.window.h, r.score, r.patches
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::{pattern_preset, ProcessId};

    #[test]
    fn similarity_fit_recovers_collinear_strip() {
        let frame = ScanFrame::new(100, 100);
        let truth = RegistrationMap::similarity(frame, 7.5, 0.8, [3.0, 4.0]).unwrap();
        let pairs: Vec<(Point, Point)> = (0..5)
            .map(|k| {
                let p = [2.5 + 5.0 * k as f64, 2.0];
                (p, truth.screen_to_scan(p).unwrap())
            })
            .collect();
        let fit = fit_similarity(&pairs, frame).unwrap();
        for p in [[0.0, 0.0], [10.0, 7.0]] {
            let (a, b) = (fit.screen_to_scan(p).unwrap(), truth.screen_to_scan(p).unwrap());
            assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-9);
        }
    }

    #[test]
    fn candidates_skip_relabel_equivalent_turns() {
        for id in [ProcessId::Paget, ProcessId::Finlay] {
            let p = pattern_preset(id).unwrap();
            let turns: Vec<u8> = p.relabel_symmetries().iter().map(|s| s.quarter_turns).collect();
            let c = rotation_candidates(&p, 1.0, 1);
            for (i, a) in c.iter().enumerate() {
                for b in &c[i + 1..] {
                    assert!(!turns.contains(&((b.0 + 4 - a.0) % 4)));
                    assert!(!turns.contains(&((a.0 + 4 - b.0) % 4)));
                }
            }
            assert_eq!(c[0].0, 0);
        }
    }

    #[test]
    fn quarter_turn_composition_rotates_the_map() {
        let frame = ScanFrame::new(64, 64);
        let seed = RegistrationMap::similarity(frame, 8.0, 10.0, [1.0, 2.0]).unwrap();
        let m = compose(&seed, 1, [0.0, 0.0]).unwrap();
        let r = DecomposedParams::from_map(&m).rotation_deg;
        assert!((r - 100.0).abs() < 1e-9);
    }
}
