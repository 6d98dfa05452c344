//! Estimating the screen → scan map from the scan itself.

mod auto;
mod coarse;
mod marks;
mod objective;
mod refine;
mod simplex;

pub use auto::{auto_register, AutoOptions, AutoRegistration, Candidate, RegistrationReport, SeedSource};
pub use coarse::{coarse_estimate, confidence_from_ratio, CoarseEstimate, SpectralPeak, CAPTURE_RANGE, MIN_CONFIDENCE};

pub use marks::{detect_registration_marks, MarkMatch, Strip, MARK_THRESHOLD, MIN_DISKS_PER_STRIP};
pub use objective::{default_windows, separation_score, window_score, WindowScore};
pub use refine::{
    refine_registration, refine_registration_with, windows_for, RefineOptions, RefineOutcome,
    DEFAULT_WINDOW_MARGIN, DEFAULT_WINDOW_SIDE,
};
pub use simplex::{minimize, SimplexResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point, RegistrationMap};
use crate::raster::Rect;
use crate::screen::ScreenPattern;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("no screen lattice found (confidence {0:.3})")]
    NoPatternFound(f64),
    #[error("expected a single-channel scan, got {0} channels")]
    NotMono(usize),
    #[error("the pattern defines no registration marks")]
    NoMarksSpec,
    #[error("{0}")]
    BadInput(String),
    #[error("window {0:?} lies outside the image")]
    WindowsOutsideImage(Rect),
    #[error("refinement stopped after {} iterations without converging", .0.iterations)]
    NotConverged(Box<RefineOutcome>),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Disagreement between two registrations, in patches, measured at a grid
/// of scan positions and taken modulo whole tiles and the pattern's
/// relabeling symmetries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchError {
    pub mean: f64,
    pub max: f64,
    /// Largest error at the four frame corners.
    pub corner: f64,
}

pub fn patch_error(
    estimate: &RegistrationMap,
    truth: &RegistrationMap,
    pattern: &ScreenPattern,
) -> Result<PatchError, RegistrationError> {
    const K: usize = 8;
    let frame = truth.frame();
    let mut probes = Vec::with_capacity((K + 1) * (K + 1));
    let mut corners = Vec::with_capacity(4);
    for j in 0..=K {
        for i in 0..=K {
            let q = [
                frame.width * i as f64 / K as f64,
                frame.height * j as f64 / K as f64,
            ];
            if (i == 0 || i == K) && (j == 0 || j == K) {
                corners.push(probes.len());
            }
            probes.push((truth.scan_to_screen(q)?, estimate.scan_to_screen(q)?));
        }
    }
    let n = pattern.sites_per_tile();
    let mut best: Option<PatchError> = None;
    for sym in pattern.relabel_symmetries() {
        let d: Vec<Point> = probes
            .iter()
            .map(|(t, e)| {
                let s = sym.apply(*e, n);
                [t[0] - s[0], t[1] - s[1]]
            })
            .collect();
        let m = d.len() as f64;
        let shift = [
            (d.iter().map(|v| v[0]).sum::<f64>() / m).round(),
            (d.iter().map(|v| v[1]).sum::<f64>() / m).round(),
        ];
        let errs: Vec<f64> = d
            .iter()
            .map(|v| (v[0] - shift[0]).hypot(v[1] - shift[1]) * n as f64)
            .collect();
        let e = PatchError {
            mean: errs.iter().sum::<f64>() / m,
            max: errs.iter().cloned().fold(0.0, f64::max),
            corner: corners.iter().map(|&i| errs[i]).fold(0.0, f64::max),
        };
        if best.is_none_or(|b| e.mean < b.mean) {
            best = Some(e);
        }
    }
    best.ok_or_else(|| RegistrationError::BadInput("pattern has no symmetries".into()))
}
