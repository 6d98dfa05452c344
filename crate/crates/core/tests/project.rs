mod common;

use std::path::Path;

use rescreen_core::colorimetry::IlluminantName;
use rescreen_core::geometry::{RegistrationMap, ScanFrame};
use rescreen_core::project::{output_matrix, run_project, Project, ProjectError, Stage};
use rescreen_core::raster::{load_raster, save_tiff16, Encoding, LoadOptions, SourceTag};
use rescreen_core::render::{collect_patch_grid, OutputSpace};
use rescreen_core::screen::{pattern_preset, ProcessId};
use rescreen_core::simulate::{simulate_plate, PlateSpec, Scene, SmoothScene};

const SIZE: usize = 360;
const PPI: f64 = 2000.0;
const SEED: u64 = 21;
const EXPOSURE: f64 = 0.6;

struct Setup {
    dir: tempfile::TempDir,
    map: RegistrationMap,
}

/// A simulated Paget negative on disk and a project over it with the exact map.
fn setup() -> Setup {
    let pattern = pattern_preset(ProcessId::Paget).unwrap();
    let period = common::period_px(&pattern, PPI);
    let origin = common::covering_origin(period, 0.8, SIZE, SIZE, [0.3, 0.55]);
    let map = RegistrationMap::similarity(ScanFrame::new(SIZE, SIZE), period, 0.8, origin).unwrap();
    let spec = PlateSpec::covering(map.clone(), SIZE, SIZE, PPI);
    let plate = simulate_plate(&SmoothScene::random(SEED, 10.0), &pattern, &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_tiff16(&plate.scan, &dir.path().join("scan.tif")).unwrap();

    let mut p = Project::new("scan.tif", SourceTag::Negative, ProcessId::Paget);
    p.set_map(Some(&map));
    p.render.output_space = OutputSpace::LinearXyz;
    // The block dyes pass more blue than the illuminant white holds.
    p.render.exposure = EXPOSURE;
    p.outputs.tiff = Some("out.tif".into());
    p.outputs.png_preview = Some("out.png".into());
    p.outputs.report = Some("report.txt".into());
    p.save(&dir.path().join("plate.json")).unwrap();
    Setup { dir, map }
}

fn load(dir: &Path) -> rescreen_core::project::LoadedProject {
    Project::load(&dir.join("plate.json")).unwrap()
}

#[test]
fn render_reproduces_the_scene() {
    let s = setup();
    let loaded = load(s.dir.path());
    let report = run_project(&loaded).unwrap();
    assert_eq!(
        report.stages,
        [
            Stage::Load,
            Stage::Mix,
            Stage::Invert,
            Stage::NyquistGate,
            Stage::Collect,
            Stage::Demosaic,
            Stage::Finalize,
            Stage::Write
        ]
    );
    assert_eq!(report.outputs.len(), 3);
    assert!(report.threshold_failures().is_empty(), "{:?}", report.threshold_failures());
    assert!(report.approximate_dyes);
    let text = std::fs::read_to_string(s.dir.path().join("report.txt")).unwrap();
    assert!(text.contains("stages = load mix invert nyquist_gate collect demosaic finalize write"));

    // Undo the colour matrix and compare with the scene at patch centres.
    let pattern = pattern_preset(ProcessId::Paget).unwrap();
    let m = output_matrix(&pattern, IlluminantName::D50, OutputSpace::LinearXyz).unwrap();
    let inv = m.try_inverse().unwrap();
    let out = load_raster(&s.dir.path().join("out.tif"), &LoadOptions::linear(SourceTag::PositiveTransparency)).unwrap();
    let out = out.raster;
    let positive = rescreen_core::raster::negative_to_positive(
        &simulate_plate(
            &SmoothScene::random(SEED, 10.0),
            &pattern,
            &PlateSpec::covering(s.map.clone(), SIZE, SIZE, PPI),
        )
        .unwrap()
        .scan,
        &Default::default(),
    )
    .unwrap();
    let grid = collect_patch_grid(&positive, &s.map, &pattern).unwrap();
    assert_eq!((out.width(), out.height()), (grid.width(), grid.height()));
    let scene = SmoothScene::random(SEED, 10.0);
    let border = 2.0 * s.map.pixels_per_patch(&pattern);
    let (mut se, mut n) = ([0.0; 3], 0usize);
    for j in 0..grid.height() {
        for i in 0..grid.width() {
            let q = s.map.screen_to_scan(grid.site_center(i, j)).unwrap();
            if q.iter().any(|&v| v < border || v > SIZE as f64 - border) {
                continue;
            }
            let xyz = nalgebra::Vector3::new(out.get(i, j, 0) as f64, out.get(i, j, 1) as f64, out.get(i, j, 2) as f64);
            let rgb = inv * xyz / EXPOSURE;
            let t = scene.rgb(grid.site_center(i, j));
            for c in 0..3 {
                se[c] += (rgb[c] - t[c]).powi(2);
            }
            n += 1;
        }
    }
    let rms = se.map(|v| (v / n as f64).sqrt());
    assert!(rms.iter().all(|&e| e < 0.05), "{rms:?}");
}

#[test]
fn rendering_twice_gives_identical_files() {
    let s = setup();
    let loaded = load(s.dir.path());
    run_project(&loaded).unwrap();
    let first = std::fs::read(s.dir.path().join("out.tif")).unwrap();
    let first_png = std::fs::read(s.dir.path().join("out.png")).unwrap();
    run_project(&loaded).unwrap();
    assert_eq!(first, std::fs::read(s.dir.path().join("out.tif")).unwrap());
    assert_eq!(first_png, std::fs::read(s.dir.path().join("out.png")).unwrap());
}

#[test]
fn unregistered_project_writes_nothing() {
    let s = setup();
    let mut loaded = load(s.dir.path());
    loaded.project.set_map(None);
    let err = run_project(&loaded).unwrap_err();
    assert!(matches!(err, ProjectError::Unregistered));
    assert!(!s.dir.path().join("out.tif").exists());
    assert!(!s.dir.path().join("report.txt").exists());
}

#[test]
fn save_load_save_is_byte_identical() {
    let s = setup();
    let path = s.dir.path().join("plate.json");
    let before = std::fs::read(&path).unwrap();
    load(s.dir.path()).project.save(&path).unwrap();
    assert_eq!(before, std::fs::read(&path).unwrap());
}

#[test]
fn missing_input_is_reported_at_load() {
    let s = setup();
    std::fs::remove_file(s.dir.path().join("scan.tif")).unwrap();
    let err = Project::load(&s.dir.path().join("plate.json")).unwrap_err();
    assert!(matches!(err, ProjectError::MissingFile(p) if p.ends_with("scan.tif")));
}

#[test]
fn stage_errors_carry_the_stage() {
    let s = setup();
    let mut loaded = load(s.dir.path());
    loaded.project.inputs.load.encoding = Encoding::GammaEncoded(-1.0);
    let e = run_project(&loaded).unwrap_err();
    assert!(e.exit_code() > 1);

    let mut loaded = load(s.dir.path());
    loaded.project.set_map(Some(&s.map.scaled_scan(0.2, SIZE, SIZE)));
    let e = run_project(&loaded).unwrap_err();
    assert_eq!(e.stage(), Stage::NyquistGate);

    let mut loaded = load(s.dir.path());
    loaded.project.render.exposure = -1.0;
    let e = run_project(&loaded).unwrap_err();
    assert_eq!(e.stage(), Stage::Project);
    assert!(!s.dir.path().join("out.tif").exists());
}

#[test]
fn screen_simulation_mode_renders_at_scan_size() {
    let s = setup();
    let mut loaded = load(s.dir.path());
    loaded.project.render.mode = rescreen_core::render::RenderMode::ScreenSimulation;
    let report = run_project(&loaded).unwrap();
    assert!(report.stages.contains(&Stage::ScreenSimulation));
    let out = load_raster(&s.dir.path().join("out.tif"), &LoadOptions::linear(SourceTag::PositiveTransparency)).unwrap();
    assert_eq!((out.raster.width(), out.raster.height()), (SIZE, SIZE));
}
