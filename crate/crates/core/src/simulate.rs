//! Forward model of the plate: a colour scene exposed through the taking
//! screen onto a panchromatic negative, then scanned.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{GeometryError, Point, RegistrationMap, ScanFrame};
use crate::raster::{InversionParams, LinearRaster, RasterError, SourceTag};
use crate::screen::{MarkLayout, ScreenPattern};

/// Scene radiance in screen coordinates (tile units), linear RGB in `[0, 1]`.
pub trait Scene: Sync {
    fn rgb(&self, p: Point) -> [f64; 3];

    fn channel(&self, p: Point, c: usize) -> f64 {
        self.rgb(p)[c]
    }
}

impl<F: Fn(Point) -> [f64; 3] + Sync> Scene for F {
    fn rgb(&self, p: Point) -> [f64; 3] {
        self(p)
    }
}

/// Sum of a few random plane waves per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothScene {
    base: [f64; 3],
    waves: [Vec<[f64; 4]>; 3],
}

impl SmoothScene {
    /// Values stay within `[0.1, 0.9]`; no wave is shorter than
    /// `min_wavelength` tiles.
    pub fn random(seed: u64, min_wavelength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = [0.0; 3];
        let mut waves: [Vec<[f64; 4]>; 3] = Default::default();
        for c in 0..3 {
            base[c] = rng.random_range(0.35..0.65);
            let count = 4;
            let budget = 0.25;
            let mut amps: Vec<f64> = (0..count).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = amps.iter().sum();
            amps.iter_mut().for_each(|a| *a *= budget / total);
            for a in amps {
                let wavelength = min_wavelength * rng.random_range(1.0..4.0);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                waves[c].push([k * dir.cos(), k * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU), a]);
            }
        }
        Self { base, waves }
    }

    pub fn uniform(rgb: [f64; 3]) -> Self {
        Self {
            base: rgb,
            waves: Default::default(),
        }
    }
}

impl Scene for SmoothScene {
    fn rgb(&self, p: Point) -> [f64; 3] {
        [self.channel(p, 0), self.channel(p, 1), self.channel(p, 2)]
    }

    fn channel(&self, p: Point, c: usize) -> f64 {
        let mut v = self.base[c];
        for w in &self.waves[c] {
            v += w[3] * (w[0] * p[0] + w[1] * p[1] + w[2]).cos();
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct PlateSpec {
    pub width: usize,
    pub height: usize,
    pub ppi: f64,
    /// Screen → scan map of the simulated scan.
    pub map: RegistrationMap,
    /// Plate extent in tiles, `[0, w) × [0, h)` in screen coordinates.
    /// Outside it the film is clear.
    pub plate_tiles: [f64; 2],
    pub inversion: InversionParams,
    /// Gaussian noise added to scanned transmittance.
    pub noise_sigma: f64,
    /// Sub-samples per pixel side for area integration.
    pub supersample: usize,
    /// Print the pattern's registration-mark strips, if it has any.
    pub marks: bool,
    /// Scan the negative itself or its contact positive.
    pub output: SourceTag,
    pub seed: u64,
}

impl PlateSpec {
    /// Plate that covers the whole scan with margin, negative output.
    pub fn covering(map: RegistrationMap, width: usize, height: usize, ppi: f64) -> Self {
        Self {
            width,
            height,
            ppi,
            map,
            plate_tiles: [f64::INFINITY; 2],
            inversion: InversionParams::default(),
            noise_sigma: 0.0,
            supersample: 3,
            marks: false,
            output: SourceTag::Negative,
            seed: 0,
        }
    }
}

/// Similarity map whose screen origin sits `offset` tiles beyond the frame
/// corner, so the plate (which starts at screen origin) covers every pixel.
pub fn covering_similarity(
    width: usize,
    height: usize,
    period_px: f64,
    rotation_deg: f64,
    offset: [f64; 2],
) -> Result<RegistrationMap, GeometryError> {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let mut lo = [f64::INFINITY; 2];
    for q in [[0.0, 0.0], [width as f64, 0.0], [0.0, height as f64], [width as f64, height as f64]] {
        lo[0] = lo[0].min((c * q[0] + s * q[1]) / period_px);
        lo[1] = lo[1].min((-s * q[0] + c * q[1]) / period_px);
    }
    let p = [lo[0] - offset[0], lo[1] - offset[1]];
    let origin = [period_px * (c * p[0] - s * p[1]), period_px * (s * p[0] + c * p[1])];
    RegistrationMap::similarity(ScanFrame::new(width, height), period_px, rotation_deg, origin)
}

#[derive(Debug, Clone)]
pub struct SimulatedPlate {
    pub scan: LinearRaster,
    /// Scan-space centres of mark disks lying wholly inside the scan.
    pub mark_centers: Vec<Point>,
}

/// Exposure reaching the emulsion at screen point `p`.
pub fn exposure_at(
    scene: &dyn Scene,
    pattern: &ScreenPattern,
    marks: Option<&MarkLayout>,
    plate_tiles: [f64; 2],
    p: Point,
) -> f64 {
    if p[0] < 0.0 || p[1] < 0.0 || p[0] >= plate_tiles[0] || p[1] >= plate_tiles[1] {
        return 0.0;
    }
    if let Some(m) = marks {
        let in_top = p[1] < m.strip_width;
        let in_bottom = plate_tiles[1].is_finite() && p[1] >= plate_tiles[1] - m.strip_width;
        if in_top || in_bottom {
            let cy = if in_top {
                0.5 * m.strip_width
            } else {
                plate_tiles[1] - 0.5 * m.strip_width
            };
            let k = (p[0] / m.disk_period - 0.5).round();
            let cx = (k + 0.5) * m.disk_period;
            let inside = (p[0] - cx).hypot(p[1] - cy) < m.disk_radius;
            return if inside {
                scene.channel(p, m.disk_color.index())
            } else {
                0.0
            };
        }
    }
    scene.channel(p, pattern.color_at(p).index())
}

/// Renders the scan of a plate photographed from `scene`.
pub fn simulate_plate(
    scene: &dyn Scene,
    pattern: &ScreenPattern,
    spec: &PlateSpec,
) -> Result<SimulatedPlate, RasterError> {
    let (w, h) = (spec.width, spec.height);
    let s = spec.supersample.max(1);
    let inv = spec.inversion;
    inv.validate()?;
    let layout = if spec.marks {
        pattern.marks().map(|m| m.layout(pattern.tile_period_mm()))
    } else {
        None
    };
    let negative_of = |e: f64| {
        if e <= 0.0 {
            1.0
        } else {
            (inv.t_floor * e.powf(-1.0 / inv.gamma)).clamp(inv.t_floor, 1.0)
        }
    };

    let mut samples = vec![0.0f32; w * h];
    samples.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for sy in 0..s {
                for sx in 0..s {
                    let q = [
                        x as f64 + (sx as f64 + 0.5) / s as f64,
                        y as f64 + (sy as f64 + 0.5) / s as f64,
                    ];
                    let t = match spec.map.scan_to_screen(q) {
                        Ok(p) => negative_of(exposure_at(scene, pattern, layout.as_ref(), spec.plate_tiles, p)),
                        Err(_) => 1.0,
                    };
                    acc += t;
                }
            }
            *out = (acc / (s * s) as f64) as f32;
        }
    });

    if spec.output == SourceTag::PositiveTransparency {
        for v in samples.iter_mut() {
            *v = inv.invert(*v as f64) as f32;
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in samples.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let scan = LinearRaster::new(w, h, 1, samples, spec.ppi, spec.output)?;

    let mut mark_centers = Vec::new();
    if let Some(m) = layout {
        let margin = m.disk_radius * spec.map.period_px() + 2.0;
        let inside = |q: Point| {
            q[0] >= margin && q[1] >= margin && q[0] <= w as f64 - margin && q[1] <= h as f64 - margin
        };
        let kmax = if spec.plate_tiles[0].is_finite() {
            (spec.plate_tiles[0] / m.disk_period) as i64
        } else {
            10_000
        };
        for k in 0..kmax {
            let mut centers = vec![m.top_center(k)];
            if spec.plate_tiles[1].is_finite() {
                centers.push(m.bottom_center(k, spec.plate_tiles[1]));
            }
            for c in centers {
                if c[0] + m.disk_radius > spec.plate_tiles[0] {
                    continue;
                }
                if let Ok(q) = spec.map.screen_to_scan(c) {
                    if inside(q) {
                        mark_centers.push(q);
                    }
                }
            }
        }
    }
    Ok(SimulatedPlate { scan, mark_centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScanFrame;
    use crate::raster::negative_to_positive;
    use crate::screen::{pattern_preset, ColorClass, ProcessId};

    #[test]
    fn smooth_scene_stays_in_range() {
        let s = SmoothScene::random(4, 10.0);
        for i in 0..200 {
            let p = [i as f64 * 1.37, i as f64 * -0.61];
            for v in s.rgb(p) {
                assert!((0.1..=0.9).contains(&v));
            }
        }
    }

    #[test]
    fn inverted_negative_recovers_exposure() {
        let paget = pattern_preset(ProcessId::Paget).unwrap();
        let map = RegistrationMap::similarity(ScanFrame::new(40, 40), 8.0, 0.0, [0.0, 0.0]).unwrap();
        let mut spec = PlateSpec::covering(map.clone(), 40, 40, 1016.0);
        spec.supersample = 1;
        let scene = SmoothScene::uniform([0.2, 0.5, 0.8]);
        let plate = simulate_plate(&scene, &paget, &spec).unwrap();
        let pos = negative_to_positive(&plate.scan, &spec.inversion).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let p = map.scan_to_screen([x as f64 + 0.5, y as f64 + 0.5]).unwrap();
                let want = scene.rgb(p)[paget.color_at(p).index()];
                assert!((pos.get(x, y, 0) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn finlay_strip_has_green_disks_on_opaque_ground() {
        let finlay = pattern_preset(ProcessId::Finlay).unwrap();
        let m = finlay.marks().unwrap().layout(finlay.tile_period_mm());
        assert_eq!(m.disk_period, 5.0);
        assert_eq!(m.strip_width, 4.0);
        let scene = SmoothScene::uniform([0.3, 0.6, 0.2]);
        let plate = [100.0, 60.0];
        let e = |p| exposure_at(&scene, &finlay, Some(&m), plate, p);
        assert_eq!(e([2.5, 2.0]), 0.6);
        assert_eq!(e([0.2, 0.2]), 0.0);
        assert_eq!(e([2.5, 58.0]), 0.6);
        assert_eq!(e([2.5 + 5.0 * 3.0, 2.0]), 0.6);
        assert_eq!(e([0.25, 5.25]), 0.2);
        assert_eq!(finlay.color_at([0.25, 5.25]), ColorClass::B);
        assert_eq!(e([-1.0, 10.0]), 0.0);
    }

    #[test]
    fn simulation_is_deterministic() {
        let paget = pattern_preset(ProcessId::Paget).unwrap();
        let map = RegistrationMap::similarity(ScanFrame::new(64, 48), 7.3, 1.1, [2.0, 1.0]).unwrap();
        let mut spec = PlateSpec::covering(map, 64, 48, 1000.0);
        spec.noise_sigma = 0.01;
        spec.seed = 11;
        let scene = SmoothScene::random(1, 12.0);
        let a = simulate_plate(&scene, &paget, &spec).unwrap();
        let b = simulate_plate(&scene, &paget, &spec).unwrap();
        assert_eq!(a.scan, b.scan);
    }
}
