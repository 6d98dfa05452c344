use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{Point, RegistrationMap};

/// Homography written as translation, rotation, axis scales, shear and
/// perspective terms, plus the distortion coefficients.
///
/// `H = [[R(θ)·U, t], [pᵀ, 1]]` with `U = [[scale_x, shear], [0, scale_y]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DecomposedParams {
    pub rotation_deg: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub shear: f64,
    pub dx: f64,
    pub dy: f64,
    pub persp_x: f64,
    pub persp_y: f64,
    pub k1: f64,
    pub k2: f64,
}

impl DecomposedParams {
    pub fn from_homography(h: &Matrix3<f64>) -> Self {
        let h = h / h[(2, 2)];
        let (a, b, c, d) = (h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
        let sx = a.hypot(c);
        let theta = c.atan2(a);
        Self {
            rotation_deg: theta.to_degrees(),
            scale_x: sx,
            scale_y: (a * d - b * c) / sx,
            shear: (a * b + c * d) / sx,
            dx: h[(0, 2)],
            dy: h[(1, 2)],
            persp_x: h[(2, 0)],
            persp_y: h[(2, 1)],
            k1: 0.0,
            k2: 0.0,
        }
    }

    pub fn from_map(m: &RegistrationMap) -> Self {
        let d = m.distortion();
        Self {
            k1: d.k1,
            k2: d.k2,
            ..Self::from_homography(m.homography())
        }
    }

    pub fn to_homography(&self) -> Matrix3<f64> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (sx, sy, sh) = (self.scale_x, self.scale_y, self.shear);
        Matrix3::new(
            c * sx,
            c * sh - s * sy,
            self.dx,
            s * sx,
            s * sh + c * sy,
            self.dy,
            self.persp_x,
            self.persp_y,
            1.0,
        )
    }
}

/// Small similarity-plus-shear correction applied in scan space about a
/// fixed point, usually the image centre.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Adjustment {
    pub dx: f64,
    pub dy: f64,
    pub rotation_deg: f64,
    pub log_scale: f64,
    pub shear: f64,
}

impl Adjustment {
    /// Scan-space matrix `T(about + d) · R · S · Sh · T(-about)`.
    pub fn matrix(&self, about: Point) -> Matrix3<f64> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.log_scale.exp();
        let m = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
            * Matrix3::new(k, k * self.shear, 0.0, 0.0, k, 0.0, 0.0, 0.0, 1.0);
        let to = Matrix3::new(1.0, 0.0, -about[0], 0.0, 1.0, -about[1], 0.0, 0.0, 1.0);
        let back = Matrix3::new(
            1.0,
            0.0,
            about[0] + self.dx,
            0.0,
            1.0,
            about[1] + self.dy,
            0.0,
            0.0,
            1.0,
        );
        back * m * to
    }

    pub fn apply(&self, h: &Matrix3<f64>, about: Point) -> Matrix3<f64> {
        self.matrix(about) * h
    }
}
