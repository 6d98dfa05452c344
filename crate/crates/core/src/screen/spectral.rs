use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ColorClass, ScreenError};

pub const GRID_START_NM: f64 = 380.0;
pub const GRID_END_NM: f64 = 730.0;
pub const GRID_STEP_NM: f64 = 5.0;
/// Number of samples on the 380–730 nm, 5 nm grid.
pub const GRID_LEN: usize = 71;

/// Sampled spectral function: transmittance, relative power or observer weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCurve", into = "RawCurve")]
pub struct SpectralCurve {
    wavelengths_nm: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCurve {
    wavelengths: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<RawCurve> for SpectralCurve {
    type Error = ScreenError;
    fn try_from(r: RawCurve) -> Result<Self, Self::Error> {
        SpectralCurve::new(r.wavelengths, r.values)
    }
}

impl From<SpectralCurve> for RawCurve {
    fn from(c: SpectralCurve) -> Self {
        RawCurve {
            wavelengths: c.wavelengths_nm,
            values: c.values,
        }
    }
}

impl SpectralCurve {
    pub fn new(wavelengths_nm: Vec<f64>, values: Vec<f64>) -> Result<Self, ScreenError> {
        if wavelengths_nm.len() != values.len() || wavelengths_nm.len() < 2 {
            return Err(ScreenError::InvalidCurve(format!(
                "{} wavelengths, {} values",
                wavelengths_nm.len(),
                values.len()
            )));
        }
        if wavelengths_nm.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ScreenError::InvalidCurve(
                "wavelengths must be strictly ascending".into(),
            ));
        }
        if wavelengths_nm.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(ScreenError::InvalidCurve("non-finite entry".into()));
        }
        Ok(Self {
            wavelengths_nm,
            values,
        })
    }

    /// Samples `f` on the standard grid.
    pub fn from_grid_fn(f: impl Fn(f64) -> f64) -> Self {
        let wl = grid_wavelengths();
        let values = wl.iter().map(|&w| f(w)).collect();
        Self::new(wl.to_vec(), values).expect("finite grid function")
    }

    pub fn wavelengths_nm(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation onto the 380–730 nm, 5 nm grid. The curve must
    /// cover the whole grid.
    pub fn resample(&self) -> Result<[f64; GRID_LEN], ScreenError> {
        let lo = self.wavelengths_nm[0];
        let hi = *self.wavelengths_nm.last().unwrap();
        if lo > GRID_START_NM + 1e-9 || hi < GRID_END_NM - 1e-9 {
            return Err(ScreenError::GridMismatch { lo, hi });
        }
        let mut out = [0.0; GRID_LEN];
        let mut seg = 0;
        for (o, w) in out.iter_mut().zip(grid_wavelengths()) {
            while seg + 2 < self.wavelengths_nm.len() && self.wavelengths_nm[seg + 1] < w {
                seg += 1;
            }
            let (w0, w1) = (self.wavelengths_nm[seg], self.wavelengths_nm[seg + 1]);
            let (v0, v1) = (self.values[seg], self.values[seg + 1]);
            *o = if w == w0 {
                v0
            } else if w == w1 {
                v1
            } else {
                let t = ((w - w0) / (w1 - w0)).clamp(0.0, 1.0);
                v0 + t * (v1 - v0)
            };
        }
        Ok(out)
    }
}

pub fn grid_wavelengths() -> [f64; GRID_LEN] {
    let mut wl = [0.0; GRID_LEN];
    for (i, w) in wl.iter_mut().enumerate() {
        *w = GRID_START_NM + GRID_STEP_NM * i as f64;
    }
    wl
}

/// Transmittance of one screen element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dye {
    Measured(SpectralCurve),
    /// Unit transmittance on `[band_lo_nm, band_hi_nm)`, zero elsewhere.
    Band { band_lo_nm: f64, band_hi_nm: f64 },
}

impl Dye {
    pub fn resample(&self) -> Result<[f64; GRID_LEN], ScreenError> {
        match self {
            Dye::Measured(c) => c.resample(),
            Dye::Band {
                band_lo_nm,
                band_hi_nm,
            } => {
                let mut out = [0.0; GRID_LEN];
                for (o, w) in out.iter_mut().zip(grid_wavelengths()) {
                    *o = if w >= *band_lo_nm && w < *band_hi_nm {
                        1.0
                    } else {
                        0.0
                    };
                }
                Ok(out)
            }
        }
    }

    fn validate(&self) -> Result<(), ScreenError> {
        match self {
            Dye::Measured(c) => {
                if c.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(ScreenError::InvalidCurve(
                        "dye transmittance outside [0, 1]".into(),
                    ));
                }
                let step_ok = c.wavelengths_nm().windows(2).all(|w| w[1] - w[0] <= 10.0 + 1e-9);
                if !step_ok {
                    return Err(ScreenError::InvalidCurve(
                        "dye curves must be sampled at 10 nm or finer".into(),
                    ));
                }
                c.resample().map(|_| ())
            }
            Dye::Band {
                band_lo_nm,
                band_hi_nm,
            } => {
                if !(band_lo_nm < band_hi_nm) {
                    return Err(ScreenError::InvalidCurve(format!(
                        "empty band {band_lo_nm}-{band_hi_nm} nm"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Spectral transmittance of the three screen element colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDyeSet", into = "RawDyeSet")]
pub struct DyeSet {
    dyes: [Dye; 3],
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct RawDyeSet {
    provenance: String,
    classes: BTreeMap<ColorClass, Dye>,
}

impl TryFrom<RawDyeSet> for DyeSet {
    type Error = ScreenError;
    fn try_from(mut r: RawDyeSet) -> Result<Self, Self::Error> {
        let mut take = |c: ColorClass| {
            r.classes
                .remove(&c)
                .ok_or_else(|| ScreenError::InvalidCurve(format!("no dye for class {c}")))
        };
        let dyes = [take(ColorClass::R)?, take(ColorClass::G)?, take(ColorClass::B)?];
        DyeSet::new(dyes, r.provenance)
    }
}

impl From<DyeSet> for RawDyeSet {
    fn from(d: DyeSet) -> Self {
        let [r, g, b] = d.dyes;
        RawDyeSet {
            provenance: d.provenance,
            classes: BTreeMap::from([(ColorClass::R, r), (ColorClass::G, g), (ColorClass::B, b)]),
        }
    }
}

impl DyeSet {
    pub fn new(dyes: [Dye; 3], provenance: String) -> Result<Self, ScreenError> {
        for d in &dyes {
            d.validate()?;
        }
        Ok(Self { dyes, provenance })
    }

    /// Ideal block dyes: B 400–500, G 500–600, R 600–700 nm.
    pub fn ideal_blocks() -> Self {
        let band = |lo, hi| Dye::Band {
            band_lo_nm: lo,
            band_hi_nm: hi,
        };
        Self {
            dyes: [band(600.0, 700.0), band(500.0, 600.0), band(400.0, 500.0)],
            provenance: "approximate: idealized block dyes, no measured spectra bundled".into(),
        }
    }

    pub fn dye(&self, class: ColorClass) -> &Dye {
        &self.dyes[class.index()]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// True when any element is an idealized block rather than a measurement.
    pub fn is_approximate(&self) -> bool {
        self.dyes.iter().any(|d| matches!(d, Dye::Band { .. }))
    }
}
