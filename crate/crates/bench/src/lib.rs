//! Shared fixtures for the benchmarks.

use rescreen_core::geometry::RegistrationMap;
use rescreen_core::raster::{LinearRaster, SourceTag};
use rescreen_core::screen::{pattern_preset, ProcessId, ScreenPattern};
use rescreen_core::simulate::{covering_similarity, simulate_plate, PlateSpec, SmoothScene};

/// A simulated positive scan with its exact map.
pub struct Fixture {
    pub pattern: ScreenPattern,
    pub scan: LinearRaster,
    pub map: RegistrationMap,
}

pub fn fixture(process: ProcessId, size: usize, ppi: f64) -> Fixture {
    let pattern = pattern_preset(process).expect("preset exists");
    let period = ppi / 25.4 * pattern.tile_period_mm();
    let map = covering_similarity(size, size, period, 0.9, [0.3, 0.4]).expect("valid map");
    let mut spec = PlateSpec::covering(map.clone(), size, size, ppi);
    spec.output = SourceTag::PositiveTransparency;
    spec.supersample = 2;
    let plate = simulate_plate(&SmoothScene::random(1, 10.0), &pattern, &spec).expect("plate renders");
    Fixture {
        pattern,
        scan: plate.scan,
        map,
    }
}
