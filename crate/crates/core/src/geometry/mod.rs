//! The parametric map between screen tile coordinates and scan pixels.
//!
//! Forward direction: `q0 = H · (p, 1)`, then radial lens distortion about
//! the principal point in scan space,
//! `q = c + (q0 - c) · (1 + k1 r² + k2 r⁴)` with `r = |q0 - c| / half_diagonal`.

mod decompose;
mod fit;

pub use decompose::{Adjustment, DecomposedParams};
pub use fit::{fit_map, FitResult};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::LinearRaster;
use crate::screen::ScreenPattern;

pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point maps to infinity")]
    AtInfinity,
    #[error("inverse distortion did not converge")]
    NoConvergence,
    #[error("homography is singular")]
    Singular,
    #[error("map failed its round-trip self-check: {0}")]
    SelfCheck(String),
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Scan extent the map is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanFrame {
    pub width: f64,
    pub height: f64,
}

impl ScanFrame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
        }
    }

    pub fn of(raster: &LinearRaster) -> Self {
        Self::new(raster.width(), raster.height())
    }

    pub fn center(&self) -> Point {
        [self.width / 2.0, self.height / 2.0]
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width.hypot(self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0
    }

    #[inline]
    fn factor(&self, r: f64) -> f64 {
        let r2 = r * r;
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }
}

/// Screen (tiles) ↔ scan (pixels) registration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationMap {
    homography: Matrix3<f64>,
    inverse: Matrix3<f64>,
    distortion: Distortion,
    principal_point: Point,
    half_diagonal: f64,
    frame: ScanFrame,
}

const SELF_CHECK_SCREEN_TOL: f64 = 1e-4;
const INVERSE_TOL_PX: f64 = 1e-6;

impl RegistrationMap {
    /// Builds a map and runs the 5×5 round-trip self-check over `frame`.
    /// The principal point defaults to the frame centre.
    pub fn new(
        homography: Matrix3<f64>,
        distortion: Distortion,
        frame: ScanFrame,
        principal_point: Option<Point>,
    ) -> Result<Self, GeometryError> {
        let map = Self::from_parts(
            homography,
            distortion,
            frame,
            principal_point.unwrap_or_else(|| frame.center()),
            frame.half_diagonal(),
        )?;
        map.self_check()?;
        Ok(map)
    }

    fn from_parts(
        homography: Matrix3<f64>,
        distortion: Distortion,
        frame: ScanFrame,
        principal_point: Point,
        half_diagonal: f64,
    ) -> Result<Self, GeometryError> {
        if homography.iter().any(|v| !v.is_finite())
            || !(distortion.k1.is_finite() && distortion.k2.is_finite())
        {
            return Err(GeometryError::Singular);
        }
        let h33 = homography[(2, 2)];
        if h33.abs() < 1e-12 {
            return Err(GeometryError::Singular);
        }
        let h = homography / h33;
        if h.determinant().abs() <= 1e-12 {
            return Err(GeometryError::Singular);
        }
        let inverse = h.try_inverse().ok_or(GeometryError::Singular)?;
        Ok(Self {
            homography: h,
            inverse,
            distortion,
            principal_point,
            half_diagonal,
            frame,
        })
    }

    /// Similarity map: screen origin at `origin` (scan px), `period_px`
    /// pixels per tile, screen axes rotated by `rotation_deg`.
    pub fn similarity(
        frame: ScanFrame,
        period_px: f64,
        rotation_deg: f64,
        origin: Point,
    ) -> Result<Self, GeometryError> {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let h = Matrix3::new(
            period_px * c,
            -period_px * s,
            origin[0],
            period_px * s,
            period_px * c,
            origin[1],
            0.0,
            0.0,
            1.0,
        );
        Self::new(h, Distortion::default(), frame, None)
    }

    pub fn identity(frame: ScanFrame) -> Self {
        Self::new(Matrix3::identity(), Distortion::default(), frame, None)
            .expect("identity map is valid")
    }

    fn self_check(&self) -> Result<(), GeometryError> {
        // Probe in scan space so that the grid covers the footprint.
        for j in 0..5 {
            for i in 0..5 {
                let q = [
                    self.frame.width * i as f64 / 4.0,
                    self.frame.height * j as f64 / 4.0,
                ];
                let p = self
                    .scan_to_screen(q)
                    .map_err(|e| GeometryError::SelfCheck(format!("probe {q:?}: {e}")))?;
                let q2 = self
                    .screen_to_scan(p)
                    .map_err(|e| GeometryError::SelfCheck(format!("probe {q:?}: {e}")))?;
                let p2 = self
                    .scan_to_screen(q2)
                    .map_err(|e| GeometryError::SelfCheck(format!("probe {q:?}: {e}")))?;
                let err = dist(p, p2);
                if !(err < SELF_CHECK_SCREEN_TOL) {
                    return Err(GeometryError::SelfCheck(format!(
                        "round trip error {err:e} tiles at {q:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn homography(&self) -> &Matrix3<f64> {
        &self.homography
    }

    pub fn distortion(&self) -> Distortion {
        self.distortion
    }

    pub fn principal_point(&self) -> Point {
        self.principal_point
    }

    pub fn half_diagonal(&self) -> f64 {
        self.half_diagonal
    }

    pub fn frame(&self) -> ScanFrame {
        self.frame
    }

    /// Same map with a different homography; distortion and frame kept.
    pub fn with_homography(&self, h: Matrix3<f64>) -> Result<Self, GeometryError> {
        let m = Self::from_parts(
            h,
            self.distortion,
            self.frame,
            self.principal_point,
            self.half_diagonal,
        )?;
        m.self_check()?;
        Ok(m)
    }

    pub fn with_distortion(&self, d: Distortion) -> Result<Self, GeometryError> {
        let m = Self::from_parts(
            self.homography,
            d,
            self.frame,
            self.principal_point,
            self.half_diagonal,
        )?;
        m.self_check()?;
        Ok(m)
    }

    /// Same frame and principal point, new homography and distortion.
    pub fn with_parts(&self, h: Matrix3<f64>, d: Distortion) -> Result<Self, GeometryError> {
        let m = Self::from_parts(h, d, self.frame, self.principal_point, self.half_diagonal)?;
        m.self_check()?;
        Ok(m)
    }

    /// The same physical map expressed for a crop whose origin is at
    /// `(dx, dy)` in this map's scan coordinates.
    pub fn for_crop(&self, dx: f64, dy: f64, width: usize, height: usize) -> Self {
        let shift = Matrix3::new(1.0, 0.0, -dx, 0.0, 1.0, -dy, 0.0, 0.0, 1.0);
        Self::from_parts(
            shift * self.homography,
            self.distortion,
            ScanFrame::new(width, height),
            [self.principal_point[0] - dx, self.principal_point[1] - dy],
            self.half_diagonal,
        )
        .expect("translating a valid map keeps it valid")
    }

    /// The map for the same plate scanned at `factor` times the resolution
    /// (scan coordinates scaled about the origin).
    pub fn scaled_scan(&self, factor: f64, width: usize, height: usize) -> Self {
        let s = Matrix3::new(factor, 0.0, 0.0, 0.0, factor, 0.0, 0.0, 0.0, 1.0);
        Self::from_parts(
            s * self.homography,
            self.distortion,
            ScanFrame::new(width, height),
            [self.principal_point[0] * factor, self.principal_point[1] * factor],
            self.half_diagonal * factor,
        )
        .expect("scaling a valid map keeps it valid")
    }

    #[inline]
    fn apply_homography(h: &Matrix3<f64>, p: Point) -> Result<Point, GeometryError> {
        let v = h * Vector3::new(p[0], p[1], 1.0);
        if v.z.abs() < 1e-12 {
            return Err(GeometryError::AtInfinity);
        }
        Ok([v.x / v.z, v.y / v.z])
    }

    /// Undistorted scan position of screen point `p`.
    #[inline]
    pub fn screen_to_undistorted(&self, p: Point) -> Result<Point, GeometryError> {
        Self::apply_homography(&self.homography, p)
    }

    #[inline]
    pub fn screen_to_scan(&self, p: Point) -> Result<Point, GeometryError> {
        let q0 = Self::apply_homography(&self.homography, p)?;
        if self.distortion.is_zero() {
            return Ok(q0);
        }
        let c = self.principal_point;
        let d = [q0[0] - c[0], q0[1] - c[1]];
        let r = d[0].hypot(d[1]) / self.half_diagonal;
        let f = self.distortion.factor(r);
        Ok([c[0] + d[0] * f, c[1] + d[1] * f])
    }

    /// Removes lens distortion from a scan point.
    pub fn undistort(&self, q: Point) -> Result<Point, GeometryError> {
        if self.distortion.is_zero() {
            return Ok(q);
        }
        let c = self.principal_point;
        let d = [q[0] - c[0], q[1] - c[1]];
        let target = d[0].hypot(d[1]) / self.half_diagonal;
        if target == 0.0 {
            return Ok(q);
        }
        let s = self.invert_radius(target)?;
        let k = s / target;
        Ok([c[0] + d[0] * k, c[1] + d[1] * k])
    }

    /// Solves `s · (1 + k1 s² + k2 s⁴) = target` for the undistorted radius.
    fn invert_radius(&self, target: f64) -> Result<f64, GeometryError> {
        let Distortion { k1, k2 } = self.distortion;
        let g = |s: f64| s * (1.0 + k1 * s * s + k2 * s.powi(4)) - target;
        let dg = |s: f64| 1.0 + 3.0 * k1 * s * s + 5.0 * k2 * s.powi(4);
        let tol = INVERSE_TOL_PX / self.half_diagonal;

        // Damped Newton from the undistorted guess.
        let mut s = target;
        let mut gs = g(s);
        for _ in 0..20 {
            if gs.abs() < tol {
                return Ok(s);
            }
            let slope = dg(s);
            if !(slope > 0.0) {
                break;
            }
            let mut step = gs / slope;
            let mut next = s - step;
            let mut gn = g(next);
            let mut halvings = 0;
            while gn.abs() > gs.abs() && halvings < 30 {
                step *= 0.5;
                next = s - step;
                gn = g(next);
                halvings += 1;
            }
            s = next;
            gs = gn;
        }
        if gs.abs() < tol {
            return Ok(s);
        }

        // Bisection fallback on the monotone branch starting at zero.
        let mut hi = target.max(1e-12);
        let mut grow = 0;
        while g(hi) < 0.0 {
            hi *= 2.0;
            grow += 1;
            if grow > 60 {
                return Err(GeometryError::NoConvergence);
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < tol * 1e-3 {
                break;
            }
        }
        let s = 0.5 * (lo + hi);
        if g(s).abs() < tol && dg(s) > 0.0 {
            Ok(s)
        } else {
            Err(GeometryError::NoConvergence)
        }
    }

    #[inline]
    pub fn scan_to_screen(&self, q: Point) -> Result<Point, GeometryError> {
        let q0 = self.undistort(q)?;
        Self::apply_homography(&self.inverse, q0)
    }

    /// Scan-space distance covered by one patch step, median over a probe grid.
    pub fn pixels_per_patch(&self, pattern: &ScreenPattern) -> f64 {
        let step = 1.0 / pattern.sites_per_tile() as f64;
        let mut samples = Vec::with_capacity(2 * 49);
        for j in 0..7 {
            for i in 0..7 {
                let q = [
                    self.frame.width * (i as f64 + 0.5) / 7.0,
                    self.frame.height * (j as f64 + 0.5) / 7.0,
                ];
                let Ok(p) = self.scan_to_screen(q) else { continue };
                let Ok(q0) = self.screen_to_scan(p) else { continue };
                for dp in [[step, 0.0], [0.0, step]] {
                    if let Ok(q1) = self.screen_to_scan([p[0] + dp[0], p[1] + dp[1]]) {
                        samples.push(dist(q0, q1));
                    }
                }
            }
        }
        median(&mut samples)
    }

    /// Scan pixels per tile (geometric mean of the two screen axes).
    pub fn period_px(&self) -> f64 {
        let a = self.homography.fixed_view::<2, 2>(0, 0);
        a.determinant().abs().sqrt()
    }
}

/// Scan → screen evaluation for inner loops. The radial inverse is read
/// from a table of `s / t` against `t²` built with the checked solver;
/// points beyond the table take the checked path.
#[derive(Debug, Clone)]
pub(crate) struct FastInverse {
    inv: [f64; 9],
    c: Point,
    inv_r2: f64,
    /// `s / t` at `t² = i · step`.
    table: Vec<f64>,
    step: f64,
}

impl FastInverse {
    const SIZE: usize = 2048;

    pub(crate) fn new(map: &RegistrationMap) -> Self {
        let m = &map.inverse;
        let c = map.principal_point;
        let r = map.half_diagonal;
        let mut table = Vec::new();
        let mut step = 0.0;
        if !map.distortion.is_zero() {
            let f = map.frame;
            let t2max = [[0.0, 0.0], [f.width, 0.0], [0.0, f.height], [f.width, f.height]]
                .iter()
                .map(|q| ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)) / (r * r))
                .fold(0.0, f64::max)
                * 1.1
                + 1e-9;
            step = t2max / (Self::SIZE - 1) as f64;
            for i in 0..Self::SIZE {
                let t = (i as f64 * step).sqrt();
                let ratio = if i == 0 {
                    1.0
                } else {
                    match map.invert_radius(t) {
                        Ok(s) => s / t,
                        Err(_) => f64::NAN,
                    }
                };
                table.push(ratio);
            }
        }
        Self {
            inv: [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            c,
            inv_r2: 1.0 / (r * r),
            table,
            step,
        }
    }

    #[inline]
    pub(crate) fn apply(&self, map: &RegistrationMap, q: Point) -> Option<Point> {
        let mut q0 = q;
        if !self.table.is_empty() {
            let d = [q[0] - self.c[0], q[1] - self.c[1]];
            let u = (d[0] * d[0] + d[1] * d[1]) * self.inv_r2 / self.step;
            let i = u as usize;
            if i + 1 >= self.table.len() {
                return map.scan_to_screen(q).ok();
            }
            let f = u - i as f64;
            let k = self.table[i] + f * (self.table[i + 1] - self.table[i]);
            if !k.is_finite() {
                return map.scan_to_screen(q).ok();
            }
            q0 = [self.c[0] + d[0] * k, self.c[1] + d[1] * k];
        }
        let m = &self.inv;
        let z = m[6] * q0[0] + m[7] * q0[1] + m[8];
        if z.abs() < 1e-12 {
            return None;
        }
        let iz = 1.0 / z;
        Some([
            (m[0] * q0[0] + m[1] * q0[1] + m[2]) * iz,
            (m[3] * q0[0] + m[4] * q0[1] + m[5]) * iz,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "px_per_patch", rename_all = "snake_case")]
pub enum NyquistVerdict {
    Ok(f64),
    Reject(f64),
}

impl NyquistVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, NyquistVerdict::Ok(_))
    }

    pub fn px_per_patch(&self) -> f64 {
        match *self {
            NyquistVerdict::Ok(v) | NyquistVerdict::Reject(v) => v,
        }
    }
}

/// Each patch must span at least two scan pixels.
pub fn nyquist_gate(
    map: &RegistrationMap,
    pattern: &ScreenPattern,
    _raster: &LinearRaster,
) -> NyquistVerdict {
    let ppp = map.pixels_per_patch(pattern);
    if ppp >= 2.0 - 1e-9 {
        NyquistVerdict::Ok(ppp)
    } else {
        NyquistVerdict::Reject(ppp)
    }
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Serialized form stored in project files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    /// Row-major, `h33 = 1`.
    pub homography: [f64; 9],
    pub k1: f64,
    pub k2: f64,
    pub principal_point: Point,
    pub half_diagonal_px: f64,
    pub frame: ScanFrame,
    /// Distortion is applied in scan space after the homography.
    pub distortion_order: String,
    /// Human-readable breakdown, display only; ignored on load.
    pub decomposed: DecomposedParams,
}

pub const DISTORTION_AFTER_HOMOGRAPHY: &str = "after_homography";

impl From<&RegistrationMap> for MapRecord {
    fn from(m: &RegistrationMap) -> Self {
        let h = m.homography;
        MapRecord {
            homography: [
                h[(0, 0)],
                h[(0, 1)],
                h[(0, 2)],
                h[(1, 0)],
                h[(1, 1)],
                h[(1, 2)],
                h[(2, 0)],
                h[(2, 1)],
                h[(2, 2)],
            ],
            k1: m.distortion.k1,
            k2: m.distortion.k2,
            principal_point: m.principal_point,
            half_diagonal_px: m.half_diagonal,
            frame: m.frame,
            distortion_order: DISTORTION_AFTER_HOMOGRAPHY.into(),
            decomposed: DecomposedParams::from_map(m),
        }
    }
}

impl TryFrom<&MapRecord> for RegistrationMap {
    type Error = GeometryError;

    fn try_from(r: &MapRecord) -> Result<Self, Self::Error> {
        if r.distortion_order != DISTORTION_AFTER_HOMOGRAPHY {
            return Err(GeometryError::SelfCheck(format!(
                "unsupported distortion order '{}'",
                r.distortion_order
            )));
        }
        let h = Matrix3::from_row_slice(&r.homography);
        let m = Self::from_parts(
            h,
            Distortion { k1: r.k1, k2: r.k2 },
            r.frame,
            r.principal_point,
            r.half_diagonal_px,
        )?;
        m.self_check()?;
        Ok(m)
    }
}
