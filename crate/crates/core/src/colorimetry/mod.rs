//! Process RGB (per-class patch luminosity) to XYZ via dye spectra, an
//! illuminant and the CIE 1931 2° observer; then to display RGB.

mod tables;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LinearRaster, Rect};
use crate::screen::{
    grid_wavelengths, ColorClass, DyeSet, ScreenError, SpectralCurve, GRID_LEN, GRID_STEP_NM,
};

#[derive(Debug, Error)]
pub enum ColorError {
    #[error(transparent)]
    Curve(#[from] ScreenError),
    #[error("display primaries are singular")]
    SingularPrimaries,
    #[error("illuminant has negative power")]
    NegativeIlluminant,
    #[error("white-balance region {0:?} is outside the image or smaller than 64 px")]
    BadRegion(Rect),
    #[error("white-balance region is black in channel {0}")]
    BlackRegion(usize),
    #[error("expected a 3-channel raster")]
    NotRgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IlluminantName {
    #[default]
    D50,
    D65,
    EqualEnergy,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Illuminant {
    pub name: IlluminantName,
    power: [f64; GRID_LEN],
}

impl Illuminant {
    pub fn d50() -> Self {
        Self {
            name: IlluminantName::D50,
            power: tables::d50(),
        }
    }

    pub fn d65() -> Self {
        Self {
            name: IlluminantName::D65,
            power: tables::d65(),
        }
    }

    pub fn equal_energy() -> Self {
        Self {
            name: IlluminantName::EqualEnergy,
            power: [1.0; GRID_LEN],
        }
    }

    pub fn custom(curve: &SpectralCurve) -> Result<Self, ColorError> {
        let power = curve.resample()?;
        if power.iter().any(|&v| v < 0.0) {
            return Err(ColorError::NegativeIlluminant);
        }
        Ok(Self {
            name: IlluminantName::Custom,
            power,
        })
    }

    /// Named bundled illuminant; `Custom` has no bundled data.
    pub fn named(name: IlluminantName) -> Option<Self> {
        match name {
            IlluminantName::D50 => Some(Self::d50()),
            IlluminantName::D65 => Some(Self::d65()),
            IlluminantName::EqualEnergy => Some(Self::equal_energy()),
            IlluminantName::Custom => None,
        }
    }

    pub fn power(&self) -> &[f64; GRID_LEN] {
        &self.power
    }

    /// Illuminant white, scaled to `Y = 1`.
    pub fn white_xyz(&self, observer: &Observer) -> [f64; 3] {
        let w = observer.integrate(&[1.0; GRID_LEN], &self.power);
        [w[0] / w[1], 1.0, w[2] / w[1]]
    }
}

/// Colour-matching functions on the 5 nm grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    cmf: [[f64; GRID_LEN]; 3],
}

impl Observer {
    pub fn cie1931() -> Self {
        Self {
            cmf: tables::cie1931(),
        }
    }

    pub fn cmf(&self) -> &[[f64; GRID_LEN]; 3] {
        &self.cmf
    }

    /// Rectangular-rule `Σ T(λ) S(λ) cmf(λ) Δλ` for each of x̄, ȳ, z̄.
    pub fn integrate(&self, t: &[f64; GRID_LEN], s: &[f64; GRID_LEN]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, cmf) in out.iter_mut().zip(&self.cmf) {
            *o = t
                .iter()
                .zip(s)
                .zip(cmf)
                .map(|((t, s), c)| t * s * c)
                .sum::<f64>()
                * GRID_STEP_NM;
        }
        out
    }
}

/// Unnormalized dye matrix: column `c` is the XYZ of dye `c` under the illuminant.
pub fn raw_dye_matrix(
    dyes: &DyeSet,
    illuminant: &Illuminant,
    observer: &Observer,
) -> Result<Matrix3<f64>, ColorError> {
    let mut m = Matrix3::zeros();
    for c in ColorClass::ALL {
        let t = dyes.dye(c).resample()?;
        let col = observer.integrate(&t, &illuminant.power);
        m.set_column(c.index(), &Vector3::from(col));
    }
    Ok(m)
}

/// Process RGB → XYZ. A unit stimulus in every class, mixed in the screen's
/// area proportions, lands on `Y = 1`: `M = M_raw · diag(f) / Y_white`.
pub fn dye_to_xyz_matrix(
    dyes: &DyeSet,
    illuminant: &Illuminant,
    observer: &Observer,
    class_fractions: [f64; 3],
) -> Result<Matrix3<f64>, ColorError> {
    let raw = raw_dye_matrix(dyes, illuminant, observer)?;
    let mixed = raw * Matrix3::from_diagonal(&Vector3::from(class_fractions));
    let y_white: f64 = mixed.row(1).sum();
    if y_white <= 0.0 {
        return Ok(Matrix3::zeros());
    }
    Ok(mixed / y_white)
}

pub fn chromaticity(xyz: [f64; 3]) -> [f64; 2] {
    let s = xyz[0] + xyz[1] + xyz[2];
    [xyz[0] / s, xyz[1] / s]
}

fn xy_to_xyz(xy: [f64; 2]) -> Vector3<f64> {
    Vector3::new(xy[0] / xy[1], 1.0, (1.0 - xy[0] - xy[1]) / xy[1])
}

/// Target display: primary and white chromaticities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplaySpace {
    pub primaries: [[f64; 2]; 3],
    pub white: [f64; 2],
}

impl DisplaySpace {
    pub fn srgb() -> Self {
        Self {
            primaries: [[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]],
            white: [0.3127, 0.3290],
        }
    }

    /// Linear RGB → XYZ for this display (white at `Y = 1`).
    pub fn rgb_to_xyz(&self) -> Result<Matrix3<f64>, ColorError> {
        let p = Matrix3::from_columns(&[
            xy_to_xyz(self.primaries[0]),
            xy_to_xyz(self.primaries[1]),
            xy_to_xyz(self.primaries[2]),
        ]);
        if p.iter().any(|v| !v.is_finite()) || p.determinant().abs() < 1e-12 {
            return Err(ColorError::SingularPrimaries);
        }
        let s = p
            .try_inverse()
            .ok_or(ColorError::SingularPrimaries)?
            * xy_to_xyz(self.white);
        Ok(p * Matrix3::from_diagonal(&s))
    }
}

const BRADFORD: Matrix3<f64> = Matrix3::new(
    0.8951, 0.2664, -0.1614, -0.7502, 1.7135, 0.0367, 0.0389, -0.0685, 1.0296,
);

/// Linear Bradford adaptation matrix from `src` white to `dst` white (XYZ).
pub fn bradford(src: [f64; 3], dst: [f64; 3]) -> Matrix3<f64> {
    let inv = BRADFORD.try_inverse().expect("Bradford matrix is invertible");
    let s = BRADFORD * Vector3::from(src);
    let d = BRADFORD * Vector3::from(dst);
    let gain = Matrix3::from_diagonal(&Vector3::new(d[0] / s[0], d[1] / s[1], d[2] / s[2]));
    inv * gain * BRADFORD
}

/// XYZ (relative to `source_white`) ↔ linear display RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplayTransform {
    xyz_to_rgb: Matrix3<f64>,
    rgb_to_xyz: Matrix3<f64>,
}

impl DisplayTransform {
    pub fn new(space: &DisplaySpace, source_white: [f64; 3]) -> Result<Self, ColorError> {
        let to_xyz = space.rgb_to_xyz()?;
        let target_white = xy_to_xyz(space.white);
        let adapt = bradford(source_white, target_white.into());
        let from_xyz = to_xyz.try_inverse().ok_or(ColorError::SingularPrimaries)?;
        let xyz_to_rgb = from_xyz * adapt;
        let rgb_to_xyz = xyz_to_rgb.try_inverse().ok_or(ColorError::SingularPrimaries)?;
        Ok(Self {
            xyz_to_rgb,
            rgb_to_xyz,
        })
    }

    pub fn xyz_to_rgb_matrix(&self) -> &Matrix3<f64> {
        &self.xyz_to_rgb
    }

    /// Unclamped conversion.
    pub fn xyz_to_display(&self, xyz: [f64; 3]) -> [f64; 3] {
        (self.xyz_to_rgb * Vector3::from(xyz)).into()
    }

    /// Conversion with per-channel clamping to `[0, 1]`; the flag reports
    /// whether anything was clipped.
    pub fn xyz_to_display_clamped(&self, xyz: [f64; 3]) -> ([f64; 3], bool) {
        let rgb = self.xyz_to_display(xyz);
        let clamped = rgb.map(|v| v.clamp(0.0, 1.0));
        (clamped, clamped != rgb)
    }

    pub fn display_to_xyz(&self, rgb: [f64; 3]) -> [f64; 3] {
        (self.rgb_to_xyz * Vector3::from(rgb)).into()
    }
}

/// Per-channel gains that equalize the channel means over `region`.
pub fn auto_white_balance(rgb: &LinearRaster, region: Rect) -> Result<[f64; 3], ColorError> {
    if rgb.channels() != 3 {
        return Err(ColorError::NotRgb);
    }
    if !region.fits(rgb.width(), rgb.height()) || region.area() < 64 {
        return Err(ColorError::BadRegion(region));
    }
    let mut sums = [0.0f64; 3];
    for y in region.y..region.y + region.h {
        let row = rgb.row(y);
        for px in row[region.x * 3..(region.x + region.w) * 3].chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
    }
    let means = sums.map(|s| s / region.area() as f64);
    if let Some(c) = means.iter().position(|&m| m < 1e-6) {
        return Err(ColorError::BlackRegion(c));
    }
    let m = means.iter().sum::<f64>() / 3.0;
    Ok(means.map(|v| m / v))
}

/// The 5 nm observer grid as wavelengths, for diagnostics.
pub fn wavelengths() -> [f64; GRID_LEN] {
    grid_wavelengths()
}
