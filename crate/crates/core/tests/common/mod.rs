#![allow(dead_code)]

use rescreen_core::geometry::{RegistrationMap, ScanFrame};
use rescreen_core::raster::{negative_to_positive, LinearRaster, SourceTag};
use rescreen_core::registration::{RefineOutcome, RegistrationError};
use rescreen_core::render::{collect_patch_grid, demosaic};
use rescreen_core::screen::{pattern_preset, ProcessId, ScreenPattern};
use rescreen_core::simulate::{simulate_plate, PlateSpec, Scene, SimulatedPlate, SmoothScene};

pub const MM_PER_INCH: f64 = 25.4;

pub fn period_px(pattern: &ScreenPattern, ppi: f64) -> f64 {
    ppi / MM_PER_INCH * pattern.tile_period_mm()
}

/// Positive scan of a plate covering the whole frame.
pub struct Scan {
    pub truth: RegistrationMap,
    pub plate: SimulatedPlate,
}

impl Scan {
    pub fn mono(&self) -> &LinearRaster {
        &self.plate.scan
    }
}

pub fn positive_scan(
    pattern: &ScreenPattern,
    size: usize,
    ppi: f64,
    period: f64,
    rotation_deg: f64,
    origin: [f64; 2],
    noise: f64,
    seed: u64,
) -> Scan {
    let truth = RegistrationMap::similarity(ScanFrame::new(size, size), period, rotation_deg, origin).unwrap();
    let mut spec = PlateSpec::covering(truth.clone(), size, size, ppi);
    spec.output = SourceTag::PositiveTransparency;
    spec.noise_sigma = noise;
    spec.supersample = 2;
    spec.seed = seed;
    let plate = simulate_plate(&SmoothScene::random(seed, 10.0), pattern, &spec).unwrap();
    Scan { truth, plate }
}

/// Unwraps an outcome, accepting one that stopped at the iteration cap.
pub fn outcome(r: Result<RefineOutcome, RegistrationError>) -> RefineOutcome {
    match r {
        Ok(o) => o,
        Err(RegistrationError::NotConverged(o)) => *o,
        Err(e) => panic!("refinement failed: {e}"),
    }
}

/// Screen origin placing the plate's corner `offset` tiles outside the
/// frame, so the plate covers every scan pixel.
pub fn covering_origin(period: f64, rotation_deg: f64, width: usize, height: usize, offset: [f64; 2]) -> [f64; 2] {
    let m = rescreen_core::simulate::covering_similarity(width, height, period, rotation_deg, offset).unwrap();
    let h = m.homography();
    [h[(0, 2)], h[(1, 2)]]
}

/// Negative of a random scene through inversion, collection and demosaicing
/// with the exact map; per-channel RMS against the scene at patch centres
/// more than two patches inside the frame.
pub fn round_trip_rms(process: ProcessId, ppi: f64, seed: u64, rot: f64) -> [f64; 3] {
    let pattern = pattern_preset(process).unwrap();
    let (w, h) = (600, 500);
    let period = period_px(&pattern, ppi);
    let origin = covering_origin(period, rot, w, h, [0.37, 0.61]);
    let map = RegistrationMap::similarity(ScanFrame::new(w, h), period, rot, origin).unwrap();
    let spec = PlateSpec::covering(map.clone(), w, h, ppi);
    let scene = SmoothScene::random(seed, 10.0);
    let plate = simulate_plate(&scene, &pattern, &spec).unwrap();
    let pos = negative_to_positive(&plate.scan, &spec.inversion).unwrap();
    let grid = collect_patch_grid(&pos, &map, &pattern).unwrap();
    let rgb = demosaic(&grid, &pattern).unwrap();
    let border = 2.0 * period / pattern.sites_per_tile() as f64;
    let mut se = [0.0; 3];
    let mut n = 0usize;
    for j in 0..grid.height() {
        for i in 0..grid.width() {
            let q = map.screen_to_scan(grid.site_center(i, j)).unwrap();
            if q[0] < border || q[1] < border || q[0] > w as f64 - border || q[1] > h as f64 - border {
                continue;
            }
            let t = scene.rgb(grid.site_center(i, j));
            for c in 0..3 {
                se[c] += (rgb.get(i, j, c) as f64 - t[c]).powi(2);
            }
            n += 1;
        }
    }
    se.map(|s| (s / n as f64).sqrt())
}
