//! Local refinement of a registration by maximising colour separation.

use serde::{Deserialize, Serialize};

use super::objective::{default_windows, separation_score};
use super::simplex::minimize;
use super::RegistrationError;
use crate::geometry::{Adjustment, Distortion, RegistrationMap};
use crate::raster::{LinearRaster, Rect};
use crate::screen::ScreenPattern;

pub const DEFAULT_WINDOW_SIDE: usize = 256;
pub const DEFAULT_WINDOW_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Convergence tolerance on the objective, relative to its magnitude.
    pub tolerance: f64,
    /// Initial simplex extent in patches of displacement.
    pub initial_step_patches: f64,
    /// Pixel sampling stride inside windows.
    pub stride: usize,
    /// Stride of a cheaper first pass whose result seeds the final pass,
    /// or 0 to skip it.
    pub first_pass_stride: usize,
    /// Simplex extent of the final pass when a first pass ran.
    pub final_step_patches: f64,
    pub refine_distortion: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-6,
            initial_step_patches: 0.25,
            stride: 1,
            first_pass_stride: 2,
            final_step_patches: 0.05,
            refine_distortion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub map: RegistrationMap,
    pub initial_score: f64,
    pub score: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best score after each iteration.
    pub trace: Vec<f64>,
}

/// Maps a parameter vector to a registration.
///
/// Parameters are translation, rotation, log-scale, skew and `k1`, each
/// expressed as the scan displacement in pixels it causes at the frame's
/// half-diagonal, so one simplex step moves every parameter comparably.
struct Parameterization<'a> {
    initial: &'a RegistrationMap,
    radius: f64,
    refine_distortion: bool,
}

impl Parameterization<'_> {
    fn dims(&self) -> usize {
        if self.refine_distortion {
            6
        } else {
            5
        }
    }

    fn map(&self, x: &[f64]) -> Option<RegistrationMap> {
        let r = self.radius;
        let adj = Adjustment {
            dx: x[0],
            dy: x[1],
            rotation_deg: (x[2] / r).to_degrees(),
            log_scale: x[3] / r,
            shear: x[4] / r,
        };
        let about = self.initial.principal_point();
        let h = adj.apply(self.initial.homography(), about);
        let mut d = self.initial.distortion();
        if self.refine_distortion {
            d.k1 += x[5] / r;
        }
        if d == Distortion::default() && x[..5].iter().all(|&v| v == 0.0) {
            return Some(self.initial.clone());
        }
        self.initial.with_parts(h, d).ok()
    }
}

pub fn validate_windows(mono: &LinearRaster, windows: &[Rect]) -> Result<(), RegistrationError> {
    match windows.iter().find(|w| !w.fits(mono.width(), mono.height())) {
        Some(w) => Err(RegistrationError::WindowsOutsideImage(*w)),
        None => Ok(()),
    }
}

/// Default windows for a scan.
pub fn windows_for(mono: &LinearRaster) -> Vec<Rect> {
    default_windows(mono.width(), mono.height(), DEFAULT_WINDOW_SIDE, DEFAULT_WINDOW_MARGIN)
}

/// Simplex refinement of `initial` with default options. An empty window
/// list selects the default windows.
pub fn refine_registration(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    initial: &RegistrationMap,
    windows: &[Rect],
) -> Result<RefineOutcome, RegistrationError> {
    refine_registration_with(mono, pattern, initial, windows, &RefineOptions::default())
}

pub fn refine_registration_with(
    mono: &LinearRaster,
    pattern: &ScreenPattern,
    initial: &RegistrationMap,
    windows: &[Rect],
    options: &RefineOptions,
) -> Result<RefineOutcome, RegistrationError> {
    if mono.channels() != 1 {
        return Err(RegistrationError::NotMono(mono.channels()));
    }
    let defaults;
    let windows = if windows.is_empty() {
        defaults = windows_for(mono);
        &defaults[..]
    } else {
        windows
    };
    validate_windows(mono, windows)?;

    let param = Parameterization {
        initial,
        radius: initial.half_diagonal(),
        refine_distortion: options.refine_distortion,
    };
    let score = |m: &RegistrationMap, stride: usize| separation_score(mono, pattern, m, windows, stride);
    let initial_score = score(initial, options.stride);
    let patch_px = initial.period_px() / pattern.sites_per_tile() as f64;
    let d = param.dims();
    let param = &param;
    let score = &score;
    let objective = |stride: usize| {
        move |x: &[f64]| match param.map(x) {
            Some(m) => -score(&m, stride),
            None => f64::INFINITY,
        }
    };
    let mut x0 = vec![0.0; d];
    let mut step = options.initial_step_patches * patch_px;
    let mut first_iterations = 0;
    if options.first_pass_stride > 1 {
        let first = minimize(
            objective(options.first_pass_stride),
            &x0,
            &vec![step; d],
            options.max_iterations,
            options.tolerance * 100.0,
        );
        x0 = first.x;
        first_iterations = first.iterations;
        step = options.final_step_patches * patch_px;
    }
    let mut result = minimize(objective(options.stride), &x0, &vec![step; d], options.max_iterations, options.tolerance);
    result.iterations += first_iterations;
    // Without a first pass the simplex starts at the initial map, so the
    // best vertex never scores below it.
    let map = param.map(&result.x).unwrap_or_else(|| initial.clone());
    let outcome = RefineOutcome {
        map,
        initial_score,
        score: -result.value,
        iterations: result.iterations,
        converged: result.converged,
        trace: result.trace.iter().map(|v| -v).collect(),
    };
    if outcome.converged {
        Ok(outcome)
    } else {
        Err(RegistrationError::NotConverged(Box::new(outcome)))
    }
}
