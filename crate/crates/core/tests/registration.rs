mod common;

use common::{outcome, period_px, positive_scan};
use proptest::prelude::*;
use rescreen_core::geometry::{dist, Adjustment, RegistrationMap, ScanFrame};
use rescreen_core::raster::{LinearRaster, Rect, SourceTag};
use rescreen_core::registration::*;
use rescreen_core::screen::{pattern_preset, ProcessId, ScreenPattern};
use rescreen_core::simulate::{simulate_plate, PlateSpec, SmoothScene};
use std::sync::OnceLock;

fn paget() -> ScreenPattern {
    pattern_preset(ProcessId::Paget).unwrap()
}

fn finlay() -> ScreenPattern {
    pattern_preset(ProcessId::Finlay).unwrap()
}

/// 512² Paget positive at 1500 PPI shared by the cheaper tests.
fn small_scan() -> &'static common::Scan {
    static SCAN: OnceLock<common::Scan> = OnceLock::new();
    SCAN.get_or_init(|| {
        let p = paget();
        positive_scan(&p, 512, 1500.0, period_px(&p, 1500.0), 0.7, [3.2, 1.9], 0.01, 3)
    })
}

fn shifted(map: &RegistrationMap, dx: f64, dy: f64) -> RegistrationMap {
    let h = Adjustment {
        dx,
        dy,
        ..Default::default()
    }
    .apply(map.homography(), map.frame().center());
    map.with_homography(h).unwrap()
}

#[test]
fn coarse_recovers_rotation_and_period_at_2000_ppi() {
    let p = paget();
    let period = period_px(&p, 2000.0) * 1.004;
    let scan = positive_scan(&p, 1024, 2000.0, period, 1.3, [4.0, 7.5], 0.01, 1);
    let c = coarse_estimate(scan.mono(), &p, 2000.0).unwrap();
    assert!((c.rotation_deg - 1.3).abs() < 0.05, "rotation {}", c.rotation_deg);
    assert!((c.period_px / period - 1.0).abs() < 0.005, "period {}", c.period_px);
    assert!(c.confidence > 0.9);
    assert_eq!(c.ambiguity_deg, 90.0);
}

#[test]
fn flat_raster_has_no_pattern() {
    let flat = LinearRaster::filled(512, 512, 1, 0.5, 2000.0, SourceTag::PositiveTransparency).unwrap();
    assert!(matches!(
        coarse_estimate(&flat, &paget(), 2000.0),
        Err(RegistrationError::NoPatternFound(_))
    ));
}

#[test]
fn quarter_turned_scan_gives_the_same_estimate() {
    let p = paget();
    let period = period_px(&p, 1500.0);
    let a = positive_scan(&p, 512, 1500.0, period, 0.9, [2.0, 3.0], 0.0, 2);
    // Quarter turn about the frame centre keeps the plate over the frame.
    let b = positive_scan(&p, 512, 1500.0, period, 90.9, [514.0, 3.0], 0.0, 2);
    let ca = coarse_estimate(a.mono(), &p, 1500.0).unwrap();
    let cb = coarse_estimate(b.mono(), &p, 1500.0).unwrap();
    assert!((ca.rotation_deg - cb.rotation_deg).abs() < 0.03);
    assert_eq!(ca.ambiguity_deg, cb.ambiguity_deg);
    assert!((ca.period_px - cb.period_px).abs() / ca.period_px < 1e-3);
    assert!((ca.rotation_deg - 0.9).abs() < 0.05);
}

#[test]
fn coarse_rejects_multichannel_and_bad_ppi() {
    let rgb = LinearRaster::filled(64, 64, 3, 0.5, 1000.0, SourceTag::PositiveTransparency).unwrap();
    assert!(matches!(coarse_estimate(&rgb, &paget(), 1000.0), Err(RegistrationError::NotMono(3))));
    let mono = &small_scan().plate.scan;
    assert!(matches!(coarse_estimate(mono, &paget(), -1.0), Err(RegistrationError::BadInput(_))));
}

proptest! {
    #[test]
    fn confidence_is_monotone_in_peak_ratio(a in 0.0f64..1e4, b in 0.0f64..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(confidence_from_ratio(lo) <= confidence_from_ratio(hi));
        prop_assert!((0.0..=1.0).contains(&confidence_from_ratio(a)));
    }
}

#[test]
fn score_peaks_at_the_true_site_assignment() {
    let scan = small_scan();
    let p = paget();
    let w = windows_for(scan.mono());
    let truth = separation_score(scan.mono(), &p, &scan.truth, &w, 1);
    let half_tile = scan.truth.with_homography(scan.truth.homography() * nalgebra_shift(0.5, 0.0)).unwrap();
    let offset = separation_score(scan.mono(), &p, &half_tile, &w, 1);
    assert!(truth > 10.0 * offset, "truth {truth} shifted {offset}");
    let nudged = separation_score(scan.mono(), &p, &shifted(&scan.truth, 1.0, 0.0), &w, 1);
    assert!(truth > nudged);
}

fn nalgebra_shift(x: f64, y: f64) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(1.0, 0.0, x, 0.0, 1.0, y, 0.0, 0.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn score_ignores_luminosity_scale(a in 0.05f64..1.0, dx in -2.0f64..2.0) {
        let scan = small_scan();
        let p = paget();
        let mono = scan.mono();
        let max = mono.samples().iter().cloned().fold(0.0f32, f32::max) as f64;
        let a = a / max;
        let scaled = LinearRaster::new(
            mono.width(),
            mono.height(),
            1,
            mono.samples().iter().map(|&v| (a * v as f64) as f32).collect(),
            mono.ppi(),
            mono.source_tag(),
        ).unwrap();
        let m = shifted(&scan.truth, dx, 0.3 * dx);
        let w = windows_for(mono);
        let s0 = separation_score(mono, &p, &m, &w, 1);
        let s1 = separation_score(&scaled, &p, &m, &w, 1);
        prop_assert!((s0 - s1).abs() <= 1e-4 * s0, "{} vs {}", s0, s1);
    }
}

#[test]
fn refine_recovers_a_shifted_map() {
    let scan = small_scan();
    let p = paget();
    let ppp = scan.truth.period_px() / 2.0;
    let init = shifted(&scan.truth, 0.3 * ppp, -0.2 * ppp);
    let out = outcome(refine_registration(scan.mono(), &p, &init, &[]));
    let err = patch_error(&out.map, &scan.truth, &p).unwrap();
    assert!(err.mean < 0.05, "{err:?}");
    assert!(out.score >= out.initial_score);
}

#[test]
fn refine_from_truth_stays_put_and_never_loses_score() {
    let scan = small_scan();
    let p = paget();
    let opts = RefineOptions {
        first_pass_stride: 0,
        initial_step_patches: 0.05,
        ..Default::default()
    };
    let out = outcome(refine_registration_with(scan.mono(), &p, &scan.truth, &[], &opts));
    assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    assert!(out.score >= out.initial_score);
    let err = patch_error(&out.map, &scan.truth, &p).unwrap();
    assert!(err.mean < 0.01, "{err:?}");
}

#[test]
fn refine_is_deterministic() {
    let scan = small_scan();
    let p = paget();
    let init = shifted(&scan.truth, 1.0, 0.5);
    let opts = RefineOptions {
        max_iterations: 60,
        ..Default::default()
    };
    let a = outcome(refine_registration_with(scan.mono(), &p, &init, &[], &opts));
    let b = outcome(refine_registration_with(scan.mono(), &p, &init, &[], &opts));
    assert_eq!(a.map, b.map);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn refine_reports_the_iteration_cap() {
    let scan = small_scan();
    let opts = RefineOptions {
        max_iterations: 3,
        first_pass_stride: 0,
        ..Default::default()
    };
    match refine_registration_with(scan.mono(), &paget(), &shifted(&scan.truth, 2.0, 0.0), &[], &opts) {
        Err(RegistrationError::NotConverged(o)) => {
            assert_eq!(o.iterations, 3);
            assert!(o.score >= o.initial_score);
        }
        other => panic!("expected NotConverged, got {other:?}"),
    }
}

#[test]
fn refine_rejects_windows_outside_the_image() {
    let scan = small_scan();
    let bad = Rect::new(400, 400, 200, 200);
    assert!(matches!(
        refine_registration(scan.mono(), &paget(), &scan.truth, &[bad]),
        Err(RegistrationError::WindowsOutsideImage(r)) if r == bad
    ));
}

/// Finlay negative with mark strips inside the frame.
fn finlay_plate(seed: u64) -> (RegistrationMap, rescreen_core::simulate::SimulatedPlate) {
    let f = finlay();
    let ppi = 1000.0;
    let p = period_px(&f, ppi);
    let (w, h) = (800, 700);
    let truth = RegistrationMap::similarity(ScanFrame::new(w, h), p, 0.6, [18.0, 22.5]).unwrap();
    let mut spec = PlateSpec::covering(truth.clone(), w, h, ppi);
    spec.plate_tiles = [((w as f64 - 40.0) / p).floor(), ((h as f64 - 50.0) / p).floor()];
    spec.marks = true;
    spec.noise_sigma = 0.01;
    spec.supersample = 2;
    spec.seed = seed;
    (truth, simulate_plate(&SmoothScene::random(seed, 10.0), &f, &spec).unwrap())
}

#[test]
fn marks_are_found_on_a_finlay_negative() {
    let (truth, plate) = finlay_plate(4);
    let marks = detect_registration_marks(&plate.scan, &finlay()).unwrap();
    let mut found = 0;
    for c in &plate.mark_centers {
        let e = marks.iter().map(|m| dist(m.scan, *c)).fold(f64::INFINITY, f64::min);
        if e < 0.3 {
            found += 1;
        }
    }
    assert!(found as f64 >= 0.9 * plate.mark_centers.len() as f64, "{found} of {}", plate.mark_centers.len());
    // Screen positions agree with the true map up to whole tiles.
    for m in &marks {
        let p = truth.scan_to_screen(m.scan).unwrap();
        let d = [p[0] - m.screen[0], p[1] - m.screen[1]];
        assert!((d[0] - d[0].round()).abs() < 0.05 && (d[1] - d[1].round()).abs() < 0.05, "{d:?}");
    }
    assert!(marks.iter().any(|m| m.strip == Strip::Bottom));
}

#[test]
fn marks_need_a_mark_spec() {
    let scan = small_scan();
    assert!(matches!(
        detect_registration_marks(scan.mono(), &paget()),
        Err(RegistrationError::NoMarksSpec)
    ));
}

#[test]
fn cropped_scan_without_strips_has_no_marks() {
    let (_, plate) = finlay_plate(5);
    let inner = plate.scan.crop(100, 150, 600, 400).unwrap();
    assert!(detect_registration_marks(&inner, &finlay()).unwrap().is_empty());
}

#[test]
fn auto_register_paget_without_a_seed() {
    let p = paget();
    let period = period_px(&p, 1500.0) * 0.995;
    let scan = positive_scan(&p, 768, 1500.0, period, -1.1, [5.5, 2.25], 0.01, 8);
    let r = auto_register(scan.mono(), &p, &AutoOptions::default()).unwrap();
    let err = patch_error(&r.map, &scan.truth, &p).unwrap();
    assert!(err.mean < 0.05, "{err:?}");
    assert_eq!(r.report.seed, SeedSource::Spectrum);
    let text = r.report.to_text();
    for section in ["[registration]", "[coarse]", "[peaks]", "[candidates]", "[trace]", "[residuals]"] {
        assert!(text.contains(section), "missing {section}");
    }
}

#[test]
fn auto_register_finlay_from_marks() {
    let (truth, plate) = finlay_plate(6);
    let f = finlay();
    let r = auto_register(&plate.scan, &f, &AutoOptions::default()).unwrap();
    assert_eq!(r.report.seed, SeedSource::Marks);
    assert!(r.report.mark_fit_rms_px.unwrap() < 0.3);
    let err = patch_error(&r.map, &truth, &f).unwrap();
    assert!(err.mean < 0.05, "{err:?}");
    assert!(r.report.to_text().contains("[marks]"));
}
