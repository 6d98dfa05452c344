//! Periodic screen geometry: which color sits where in the unit tile.
//!
//! Screen coordinates are measured in tiles; the whole screen is the 1×1
//! tile repeated. Each tile is further divided into an `n × n` lattice of
//! patch sites (`n = tile_period / patch_pitch`), which is the lattice the
//! render stage collects and demosaics on.

mod presets;
mod spectral;

pub use presets::{parse_pattern, pattern_preset, PatternFile};
pub use spectral::{
    grid_wavelengths, Dye, DyeSet, SpectralCurve, GRID_END_NM, GRID_LEN, GRID_START_NM, GRID_STEP_NM,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScreenError {
    #[error("unknown process {0:?}; custom patterns must be supplied explicitly")]
    UnknownProcess(ProcessId),
    #[error("{0} pixels per patch is below the Nyquist minimum of 2")]
    BelowNyquist(f64),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid spectral curve: {0}")]
    InvalidCurve(String),
    #[error("curve does not cover {lo}-{hi} nm after resampling")]
    GridMismatch { lo: f64, hi: f64 },
    #[error("pattern file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ColorClass {
    R,
    G,
    B,
}

impl ColorClass {
    pub const ALL: [ColorClass; 3] = [ColorClass::R, ColorClass::G, ColorClass::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl fmt::Display for ColorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ColorClass::R => "R",
            ColorClass::G => "G",
            ColorClass::B => "B",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessId {
    Paget,
    Finlay,
    Thames,
    Joly,
    Dufay,
    Custom,
}

impl std::str::FromStr for ProcessId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown process '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkEdge {
    TopAndBottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkShape {
    DiskStrip,
}

/// A strip of disks printed along the plate edges.
///
/// In screen coordinates the top strip occupies rows `[0, strip_width)`
/// (in tiles) and disk `k` is centred at `((k + 0.5) · disk_period, strip_width / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationMarkSpec {
    pub edge: MarkEdge,
    pub shape: MarkShape,
    pub disk_color: ColorClass,
    pub disk_period_mm: f64,
    pub disk_diameter_mm: f64,
    pub strip_width_mm: f64,
}

/// Mark geometry expressed in tile units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkLayout {
    pub disk_period: f64,
    pub disk_radius: f64,
    pub strip_width: f64,
    pub disk_color: ColorClass,
}

impl MarkLayout {
    /// Screen centre of disk `k` in the top strip.
    pub fn top_center(&self, k: i64) -> [f64; 2] {
        [(k as f64 + 0.5) * self.disk_period, 0.5 * self.strip_width]
    }

    /// Screen centre of disk `k` in the bottom strip of a plate
    /// `plate_height` tiles tall.
    pub fn bottom_center(&self, k: i64, plate_height: f64) -> [f64; 2] {
        [(k as f64 + 0.5) * self.disk_period, plate_height - 0.5 * self.strip_width]
    }
}

impl RegistrationMarkSpec {
    pub fn layout(&self, tile_period_mm: f64) -> MarkLayout {
        MarkLayout {
            disk_period: self.disk_period_mm / tile_period_mm,
            disk_radius: 0.5 * self.disk_diameter_mm / tile_period_mm,
            strip_width: self.strip_width_mm / tile_period_mm,
            disk_color: self.disk_color,
        }
    }

    fn validate(&self) -> Result<(), ScreenError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.disk_period_mm) && ok(self.disk_diameter_mm) && ok(self.strip_width_mm)) {
            return Err(ScreenError::InvalidPattern(
                "mark periods and widths must be positive".into(),
            ));
        }
        if self.disk_diameter_mm >= self.disk_period_mm {
            return Err(ScreenError::InvalidPattern(
                "mark disks overlap their neighbours".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub polygon: Vec<[f64; 2]>,
    pub class: ColorClass,
}

impl Cell {
    /// Crossing-number test with half-open edge rules; adjacent cells that
    /// share an edge never both claim a point on it.
    fn contains(&self, x: f64, y: f64) -> bool {
        let poly = &self.polygon;
        let mut inside = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let [xi, yi] = poly[i];
            let [xj, yj] = poly[j];
            if (yi > y) != (yj > y) {
                let x_cross = xi + (y - yi) * (xj - xi) / (yj - yi);
                if x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    fn area(&self) -> f64 {
        let poly = &self.polygon;
        let mut acc = 0.0;
        for i in 0..poly.len() {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % poly.len()];
            acc += x0 * y1 - x1 * y0;
        }
        0.5 * acc.abs()
    }
}

/// A relabeling symmetry of the site lattice: rotating the tile by
/// `quarter_turns · 90°` about the origin, then shifting by `shift` sites,
/// maps every site of class `c` onto a site of class `permutation[c]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symmetry {
    pub quarter_turns: u8,
    pub shift: (usize, usize),
    pub permutation: [ColorClass; 3],
}

impl Symmetry {
    /// Applies the symmetry to a screen point (tile units).
    pub fn apply(&self, p: [f64; 2], sites_per_tile: usize) -> [f64; 2] {
        let [x, y] = rotate_quarter(p, self.quarter_turns);
        let n = sites_per_tile as f64;
        [x + self.shift.0 as f64 / n, y + self.shift.1 as f64 / n]
    }
}

fn rotate_quarter([x, y]: [f64; 2], k: u8) -> [f64; 2] {
    match k % 4 {
        0 => [x, y],
        1 => [-y, x],
        2 => [-x, -y],
        _ => [y, -x],
    }
}

/// Periodic screen geometry plus physical scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenPattern {
    process_id: ProcessId,
    cells: Vec<Cell>,
    patch_pitch_mm: f64,
    tile_period_mm: f64,
    marks: Option<RegistrationMarkSpec>,
    design_fractions: Option<[f64; 3]>,
    dyes: DyeSet,
    provenance: String,
    sites_per_tile: usize,
    site_classes: Vec<ColorClass>,
}

impl ScreenPattern {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        process_id: ProcessId,
        cells: Vec<Cell>,
        patch_pitch_mm: f64,
        tile_period_mm: f64,
        marks: Option<RegistrationMarkSpec>,
        design_fractions: Option<[f64; 3]>,
        dyes: DyeSet,
        provenance: String,
    ) -> Result<Self, ScreenError> {
        let invalid = |m: String| Err(ScreenError::InvalidPattern(m));
        if !(patch_pitch_mm.is_finite() && patch_pitch_mm > 0.0) {
            return invalid(format!("patch pitch {patch_pitch_mm}"));
        }
        if !(tile_period_mm.is_finite() && tile_period_mm > 0.0) {
            return invalid(format!("tile period {tile_period_mm}"));
        }
        let ratio = tile_period_mm / patch_pitch_mm;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 * ratio {
            return invalid(format!(
                "tile period {tile_period_mm} mm is not an integer multiple of patch pitch {patch_pitch_mm} mm"
            ));
        }
        if cells.is_empty() {
            return invalid("no cells".into());
        }
        for (i, c) in cells.iter().enumerate() {
            if c.polygon.len() < 3 {
                return invalid(format!("cell {i} has fewer than 3 vertices"));
            }
            if c
                .polygon
                .iter()
                .flatten()
                .any(|v| !(v.is_finite() && (-1e-12..=1.0 + 1e-12).contains(v)))
            {
                return invalid(format!("cell {i} leaves the unit tile"));
            }
        }
        let total: f64 = cells.iter().map(Cell::area).sum();
        if (total - 1.0).abs() > 1e-6 {
            return invalid(format!("cells cover area {total}, expected 1"));
        }
        if let Some(m) = &marks {
            m.validate()?;
        }
        let mut pattern = Self {
            process_id,
            cells,
            patch_pitch_mm,
            tile_period_mm,
            marks,
            design_fractions,
            dyes,
            provenance,
            sites_per_tile: n as usize,
            site_classes: Vec::new(),
        };
        pattern.check_partition()?;
        let n = pattern.sites_per_tile;
        let mut sites = Vec::with_capacity(n * n);
        for b in 0..n {
            for a in 0..n {
                let p = [(a as f64 + 0.5) / n as f64, (b as f64 + 0.5) / n as f64];
                sites.push(pattern.color_at(p));
            }
        }
        for c in ColorClass::ALL {
            if !sites.contains(&c) {
                return invalid(format!("class {c} owns no patch site"));
            }
        }
        pattern.site_classes = sites;
        Ok(pattern)
    }

    /// Every sample of a jittered grid must fall in exactly one cell.
    fn check_partition(&self) -> Result<(), ScreenError> {
        const N: usize = 128;
        for j in 0..N {
            for i in 0..N {
                let x = (i as f64 + 0.5 + 0.113) / N as f64 - 0.113 / N as f64;
                let y = (j as f64 + 0.5 + 0.071) / N as f64 - 0.071 / N as f64;
                let hits = self.cells.iter().filter(|c| c.contains(x, y)).count();
                if hits != 1 {
                    return Err(ScreenError::InvalidPattern(format!(
                        "point ({x:.4}, {y:.4}) lies in {hits} cells"
                    )));
                }
            }
        }
        for c in ColorClass::ALL {
            if !self.cells.iter().any(|cell| cell.class == c) {
                return Err(ScreenError::InvalidPattern(format!("class {c} missing")));
            }
        }
        Ok(())
    }

    pub fn process_id(&self) -> ProcessId {
        self.process_id
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn patch_pitch_mm(&self) -> f64 {
        self.patch_pitch_mm
    }

    pub fn tile_period_mm(&self) -> f64 {
        self.tile_period_mm
    }

    pub fn marks(&self) -> Option<&RegistrationMarkSpec> {
        self.marks.as_ref()
    }

    pub fn dyes(&self) -> &DyeSet {
        &self.dyes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn design_fractions(&self) -> Option<[f64; 3]> {
        self.design_fractions
    }

    /// Number of patch sites along one side of a tile.
    pub fn sites_per_tile(&self) -> usize {
        self.sites_per_tile
    }

    /// Class of site `(a, b)` in the tile, indices taken modulo `n`.
    #[inline]
    pub fn site_class(&self, a: i64, b: i64) -> ColorClass {
        let n = self.sites_per_tile as i64;
        self.site_classes[(b.rem_euclid(n) * n + a.rem_euclid(n)) as usize]
    }

    /// Color of the screen at `p` (tile units), wrapped into the unit tile.
    pub fn color_at(&self, p: [f64; 2]) -> ColorClass {
        let x = wrap_unit(p[0]);
        let y = wrap_unit(p[1]);
        for c in &self.cells {
            if c.contains(x, y) {
                return c.class;
            }
        }
        // Unreachable for validated patterns except at float seams on the
        // tile border; fall back to the owning site.
        let n = self.sites_per_tile as f64;
        self.site_class((x * n) as i64, (y * n) as i64)
    }

    /// Area fraction of each class (R, G, B) in the tile.
    pub fn class_area_fractions(&self) -> [f64; 3] {
        let mut f = [0.0; 3];
        for c in &self.cells {
            f[c.class.index()] += c.area();
        }
        f
    }

    /// Fraction of patch sites owned by each class.
    pub fn class_site_fractions(&self) -> [f64; 3] {
        let mut f = [0.0; 3];
        for c in &self.site_classes {
            f[c.index()] += 1.0;
        }
        let n = self.site_classes.len() as f64;
        f.map(|v| v / n)
    }

    /// Scan resolution giving `pixels_per_patch` pixels across one patch.
    pub fn min_ppi(&self, pixels_per_patch: f64) -> Result<f64, ScreenError> {
        if !(pixels_per_patch >= 2.0) {
            return Err(ScreenError::BelowNyquist(pixels_per_patch));
        }
        Ok(pixels_per_patch * 25.4 / self.patch_pitch_mm)
    }

    /// All lattice symmetries that only permute class labels, identity first.
    ///
    /// These are exactly the registrations that no luminance-only criterion
    /// can tell apart: a scene can always be recolored to explain the scan
    /// equally well under any of them.
    pub fn relabel_symmetries(&self) -> Vec<Symmetry> {
        let n = self.sites_per_tile;
        let mut out = Vec::new();
        for k in 0..4u8 {
            for sb in 0..n {
                for sa in 0..n {
                    let mut perm: [Option<ColorClass>; 3] = [None; 3];
                    let mut ok = true;
                    'sites: for b in 0..n {
                        for a in 0..n {
                            let from = self.site_classes[b * n + a];
                            let sym = Symmetry {
                                quarter_turns: k,
                                shift: (sa, sb),
                                permutation: ColorClass::ALL,
                            };
                            let c = [(a as f64 + 0.5) / n as f64, (b as f64 + 0.5) / n as f64];
                            let [x, y] = sym.apply(c, n);
                            let ta = (x * n as f64 - 0.5).round() as i64;
                            let tb = (y * n as f64 - 0.5).round() as i64;
                            let to = self.site_class(ta, tb);
                            match perm[from.index()] {
                                None => perm[from.index()] = Some(to),
                                Some(t) if t == to => {}
                                Some(_) => {
                                    ok = false;
                                    break 'sites;
                                }
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    let perm = perm.map(|p| p.expect("every class owns a site"));
                    let mut seen = [false; 3];
                    perm.iter().for_each(|c| seen[c.index()] = true);
                    if seen.iter().all(|&s| s) {
                        out.push(Symmetry {
                            quarter_turns: k,
                            shift: (sa, sb),
                            permutation: perm,
                        });
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn wrap_unit(v: f64) -> f64 {
    let f = v - v.floor();
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }

    /// 2×2 checker whose lower-left cell (small x, small y) is R.
    fn checker() -> ScreenPattern {
        let cells = vec![
            Cell {
                polygon: square(0.0, 0.0, 0.5, 0.5),
                class: ColorClass::R,
            },
            Cell {
                polygon: square(0.5, 0.0, 1.0, 0.5),
                class: ColorClass::G,
            },
            Cell {
                polygon: square(0.0, 0.5, 0.5, 1.0),
                class: ColorClass::B,
            },
            Cell {
                polygon: square(0.5, 0.5, 1.0, 1.0),
                class: ColorClass::R,
            },
        ];
        ScreenPattern::new(
            ProcessId::Custom,
            cells,
            0.1,
            0.2,
            None,
            None,
            DyeSet::ideal_blocks(),
            String::new(),
        )
        .unwrap()
    }

    #[test]
    fn interior_lookup_and_wrapping() {
        let p = checker();
        assert_eq!(p.color_at([0.25, 0.25]), ColorClass::R);
        assert_eq!(p.color_at([1.25, -0.75]), ColorClass::R);
        assert_eq!(p.color_at([0.75, 0.25]), ColorClass::G);
        assert_eq!(p.color_at([-1e-18, 0.25]), ColorClass::R);
    }

    #[test]
    fn edges_are_half_open() {
        let p = checker();
        // x = 0.5 belongs to the right-hand cell, y = 0.5 to the upper one.
        assert_eq!(p.color_at([0.5, 0.25]), ColorClass::G);
        assert_eq!(p.color_at([0.5, 0.25]), p.color_at([0.5, 0.25]));
        assert_eq!(p.color_at([0.25, 0.5]), ColorClass::B);
        assert_eq!(p.color_at([0.0, 0.0]), ColorClass::R);
        assert_eq!(p.color_at([1.0, 1.0]), ColorClass::R);
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        let gap = vec![
            Cell {
                polygon: square(0.0, 0.0, 0.5, 1.0),
                class: ColorClass::R,
            },
            Cell {
                polygon: square(0.5, 0.0, 0.9, 1.0),
                class: ColorClass::G,
            },
            Cell {
                polygon: square(0.9, 0.0, 0.95, 1.0),
                class: ColorClass::B,
            },
        ];
        let r = ScreenPattern::new(
            ProcessId::Custom,
            gap,
            0.1,
            0.3,
            None,
            None,
            DyeSet::ideal_blocks(),
            String::new(),
        );
        assert!(matches!(r, Err(ScreenError::InvalidPattern(_))));

        let non_integer = ScreenPattern::new(
            ProcessId::Custom,
            checker().cells().to_vec(),
            0.1,
            0.25,
            None,
            None,
            DyeSet::ideal_blocks(),
            String::new(),
        );
        assert!(non_integer.is_err());
    }

    #[test]
    fn nyquist_resolution() {
        let paget = pattern_preset(ProcessId::Paget).unwrap();
        assert!((paget.min_ppi(2.0).unwrap() - 508.0).abs() < 1e-9);
        assert!((paget.min_ppi(8.0).unwrap() - 2032.0).abs() < 1e-9);
        assert!(matches!(paget.min_ppi(1.5), Err(ScreenError::BelowNyquist(_))));
        assert!(paget.min_ppi(f64::NAN).is_err());
    }

    #[test]
    fn paget_symmetries_swap_red_and_green() {
        let p = pattern_preset(ProcessId::Paget).unwrap();
        let syms = p.relabel_symmetries();
        assert_eq!(syms[0].quarter_turns, 0);
        assert_eq!(syms[0].shift, (0, 0));
        assert_eq!(syms[0].permutation, ColorClass::ALL);
        // Shifting by one diagonal site maps blue onto blue and swaps R, G.
        assert!(syms.iter().any(|s| s.quarter_turns == 0
            && s.shift == (1, 1)
            && s.permutation == [ColorClass::G, ColorClass::R, ColorClass::B]));
        // A one-site horizontal shift moves blue onto red/green: not a symmetry.
        assert!(!syms.iter().any(|s| s.quarter_turns == 0 && s.shift == (1, 0)));
    }

    #[test]
    fn dufay_quarter_turn_is_not_a_relabeling() {
        let p = pattern_preset(ProcessId::Dufay).unwrap();
        assert!(p.relabel_symmetries().iter().all(|s| s.quarter_turns % 2 == 0));
    }

    #[test]
    fn preset_area_fractions_match_design() {
        let n = 1000;
        for id in [
            ProcessId::Paget,
            ProcessId::Finlay,
            ProcessId::Thames,
            ProcessId::Joly,
            ProcessId::Dufay,
        ] {
            let p = pattern_preset(id).unwrap();
            let design = p.design_fractions().unwrap();
            let mut counts = [0usize; 3];
            for j in 0..n {
                for i in 0..n {
                    let c = p.color_at([i as f64 / n as f64, j as f64 / n as f64]);
                    counts[c.index()] += 1;
                }
            }
            assert_eq!(counts.iter().sum::<usize>(), n * n);
            for c in 0..3 {
                let frac = counts[c] as f64 / (n * n) as f64;
                assert!((frac - design[c]).abs() <= 0.02, "{id:?} class {c}: {frac}");
            }
            let area = p.class_area_fractions();
            for c in 0..3 {
                assert!((area[c] - design[c]).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn color_at_is_periodic(x in -3.0f64..3.0, y in -3.0f64..3.0, m in -5i32..5, n in -5i32..5) {
            let p = pattern_preset(ProcessId::Paget).unwrap();
            let q = [x + m as f64, y + n as f64];
            // Skip points that land within float noise of a cell edge.
            let near_edge = |v: f64| { let f = (v * 2.0).fract().abs(); f < 1e-9 || f > 1.0 - 1e-9 };
            prop_assume!(!near_edge(x) && !near_edge(y));
            prop_assert_eq!(p.color_at([x, y]), p.color_at(q));
        }

        #[test]
        fn min_ppi_scales(k in 2.0f64..20.0, s in 1.0f64..4.0) {
            let p = pattern_preset(ProcessId::Paget).unwrap();
            prop_assert!((p.min_ppi(k * s).unwrap() - s * p.min_ppi(k).unwrap()).abs() < 1e-6);
            let d = pattern_preset(ProcessId::Dufay).unwrap();
            let ratio = p.min_ppi(k).unwrap() / d.min_ppi(k).unwrap();
            prop_assert!((ratio - d.patch_pitch_mm() / p.patch_pitch_mm()).abs() < 1e-9);
        }
    }
}
