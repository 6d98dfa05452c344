use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use rescreen_cli::commands::{simulate, SimulateArgs, SIM_PROJECT};
use rescreen_cli::service::{router, AutoResponse, Session, StateView, STATE_HASH_HEADER, STATE_REVISION_HEADER};
use rescreen_core::geometry::{DecomposedParams, RegistrationMap};
use rescreen_core::screen::ProcessId;

struct Fixture {
    _dir: tempfile::TempDir,
    project: PathBuf,
    truth: RegistrationMap,
}

fn fixture(size: usize, unregistered: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let args = SimulateArgs {
        out: dir.path().to_path_buf(),
        process: ProcessId::Paget,
        size,
        ppi: 2000.0,
        rotation: 0.8,
        seed: 5,
        noise: 0.0,
        positive: false,
        marks: false,
        unregistered,
    };
    let truth = simulate(&args).unwrap();
    Fixture {
        project: dir.path().join(SIM_PROJECT),
        _dir: dir,
        truth,
    }
}

fn app(project: &Path) -> Router {
    router(Session::open(project).unwrap())
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn state(app: &Router) -> StateView {
    let (status, _, body) = send(app, Method::GET, "/state", None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn patch(app: &Router, body: Value) -> (StatusCode, Vec<u8>) {
    let (status, _, body) = send(app, Method::PATCH, "/state", Some(body)).await;
    (status, body)
}

/// Decoded 8-bit RGB samples.
fn decode(png_bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::Cursor::new(png_bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

fn mean_abs_diff(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
}

#[tokio::test]
async fn state_reports_the_loaded_map() {
    let f = fixture(240, false);
    let app = app(&f.project);
    let s = state(&app).await;
    assert!(s.registered && !s.dirty);
    assert_eq!(s.revision, 0);
    assert_eq!((s.scan.width, s.scan.height), (240, 240));
    let want = DecomposedParams::from_map(&f.truth);
    let got = s.params.unwrap();
    assert!((got.rotation_deg - want.rotation_deg).abs() < 1e-9);
    assert!((got.scale_x - want.scale_x).abs() < 1e-9);
    assert_eq!(s.nyquist_ok, Some(true));
    assert!(s.map.is_some());
}

#[tokio::test]
async fn patched_parameters_round_trip() {
    let f = fixture(240, false);
    let app = app(&f.project);
    let set = json!({
        "rotation_deg": 1.234567891, "scale_x": 9.87654321, "scale_y": 9.7531,
        "shear": 0.0123, "dx": -12.5, "dy": 33.25, "persp_x": 1e-6, "persp_y": -2e-6,
        "k1": 0.001, "k2": -0.0005
    });
    let (status, body) = patch(&app, json!({ "set": set })).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let s = state(&app).await;
    let p = s.params.unwrap();
    for (name, got) in [
        ("rotation_deg", p.rotation_deg),
        ("scale_x", p.scale_x),
        ("scale_y", p.scale_y),
        ("shear", p.shear),
        ("dx", p.dx),
        ("dy", p.dy),
        ("persp_x", p.persp_x),
        ("persp_y", p.persp_y),
        ("k1", p.k1),
        ("k2", p.k2),
    ] {
        let want = set[name].as_f64().unwrap();
        assert!((got - want).abs() < 1e-9, "{name}: {got} vs {want}");
    }
    assert_eq!(s.revision, 1);

    // Deltas add to the current value.
    patch(&app, json!({ "delta": { "rotation_deg": 0.5, "dx": 2.0 } })).await;
    let q = state(&app).await.params.unwrap();
    assert!((q.rotation_deg - (p.rotation_deg + 0.5)).abs() < 1e-9);
    assert!((q.dx - (p.dx + 2.0)).abs() < 1e-9);
    assert!((q.scale_x - p.scale_x).abs() < 1e-9);
}

#[tokio::test]
async fn dirty_tracks_edits_and_save() {
    let f = fixture(240, false);
    let app = app(&f.project);
    let before = std::fs::read_to_string(&f.project).unwrap();
    let s0 = state(&app).await;
    let (h0, e0) = (s0.state_hash, s0.render.exposure);

    patch(&app, json!({ "render": { "exposure": 0.3 } })).await;
    let s = state(&app).await;
    assert!(s.dirty);
    assert_ne!(s.state_hash, h0);
    assert_eq!(s.render.exposure, 0.3);
    assert_eq!(std::fs::read_to_string(&f.project).unwrap(), before);

    patch(&app, json!({ "render": { "exposure": e0 } })).await;
    let s = state(&app).await;
    assert!(!s.dirty, "restoring the saved value is not an edit");
    assert_eq!(s.state_hash, h0);

    patch(&app, json!({ "delta": { "dx": 0.25 } })).await;
    let (status, _, _) = send(&app, Method::POST, "/save", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!state(&app).await.dirty);
    let saved = rescreen_core::project::Project::load(&f.project).unwrap();
    let dx = DecomposedParams::from_map(&saved.project.map().unwrap().unwrap()).dx;
    assert!((dx - (DecomposedParams::from_map(&f.truth).dx + 0.25)).abs() < 1e-9);
}

#[tokio::test]
async fn invalid_patches_change_nothing() {
    let f = fixture(240, false);
    let app = app(&f.project);
    let before = state(&app).await;
    for body in [
        json!({ "set": { "dx": 3.0 }, "render": { "exposure": -1.0 } }),
        json!({ "set": { "scale_x": 0.0, "scale_y": 0.0 } }),
        json!({ "render": { "detail": { "ratio_min": 2.0, "ratio_max": 1.5 } } }),
        json!({ "illuminant": "custom" }),
        json!({ "set": { "warp": 1.0 } }),
        json!({ "render": { "mode": "sideways" } }),
    ] {
        let (status, err) = patch(&app, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let err: Value = serde_json::from_slice(&err).unwrap();
        assert!(err["error"].is_string());
    }
    let (status, _, _) = send(&app, Method::PATCH, "/state", None).await;
    assert_eq!(status, StatusCode::OK, "an empty patch is a no-op");
    let after = state(&app).await;
    assert_eq!(after.params, before.params);
    assert_eq!(after.render, before.render);
    assert_eq!(after.state_hash, before.state_hash);
}

#[tokio::test]
async fn tiles_are_png_at_the_requested_size() {
    let f = fixture(240, false);
    let app = app(&f.project);
    for stage in ["scan", "screen_sim", "demosaic", "final"] {
        let uri = format!("/tile?x=40&y=60&w=80&h=64&zoom=2&stage={stage}");
        let (status, headers, body) = send(&app, Method::GET, &uri, None).await;
        assert_eq!(status, StatusCode::OK, "{stage}: {}", String::from_utf8_lossy(&body));
        assert_eq!(headers["content-type"], "image/png");
        assert_eq!(headers[STATE_REVISION_HEADER], "0");
        assert_eq!(headers[STATE_HASH_HEADER].to_str().unwrap(), state(&app).await.state_hash);
        let (w, h, _) = decode(&body);
        assert_eq!((w, h), (40, 32), "{stage}");
    }
    let (_, _, a) = send(&app, Method::GET, "/tile?x=0&y=0&w=64&h=64", None).await;
    let (_, _, b) = send(&app, Method::GET, "/tile?x=0&y=0&w=64&h=64&stage=final&zoom=1", None).await;
    assert_eq!(a, b, "defaults are the final stage at zoom 1");

    for uri in [
        "/tile?x=200&y=0&w=64&h=64",
        "/tile?x=0&y=0&w=64&h=64&zoom=0",
        "/tile?x=0&y=0&w=64&h=64&stage=nope",
        "/tile?x=0&y=0&w=0&h=64",
    ] {
        let (status, _, _) = send(&app, Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
    }
}

#[tokio::test]
async fn unregistered_scans_only_serve_the_scan_stage() {
    let f = fixture(240, true);
    let app = app(&f.project);
    let s = state(&app).await;
    assert!(!s.registered && s.params.is_none());
    let (status, _, _) = send(&app, Method::GET, "/tile?x=0&y=0&w=64&h=64&stage=final", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _, _) = send(&app, Method::GET, "/tile?x=0&y=0&w=64&h=64&stage=scan", None).await;
    assert_eq!(status, StatusCode::OK);

    // A manual edit starts from the nominal period.
    let (status, _) = patch(&app, json!({ "delta": { "rotation_deg": 0.8 } })).await;
    assert_eq!(status, StatusCode::OK);
    let s = state(&app).await;
    let p = s.params.unwrap();
    let want = DecomposedParams::from_map(&f.truth);
    assert!((p.scale_x - want.scale_x).abs() < 1e-9);
    assert!((p.rotation_deg - 0.8).abs() < 1e-9);
    let (status, _, _) = send(&app, Method::GET, "/tile?x=0&y=0&w=64&h=64&stage=final", None).await;
    assert_eq!(status, StatusCode::OK);

    patch(&app, json!({ "unregister": true })).await;
    assert!(!state(&app).await.registered);
}

#[tokio::test]
async fn auto_registration_recovers_the_map() {
    let f = fixture(360, true);
    let app = app(&f.project);
    let (status, _, body) = send(&app, Method::POST, "/register/auto", Some(json!({ "use_marks": false }))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: AutoResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.state.registered && r.state.dirty);
    assert!(!r.report_text.is_empty());
    assert!(r.report.final_score >= r.report.initial_score - 1e-12);

    // Screen position of the frame centre modulo the pattern symmetry is
    // not comparable directly; compare the period and rotation mod 90°.
    let got = r.state.params.unwrap();
    let want = DecomposedParams::from_map(&f.truth);
    assert!((got.scale_x.abs() - want.scale_x).abs() / want.scale_x < 0.01, "{got:?}");
    let d = (got.rotation_deg - want.rotation_deg).rem_euclid(90.0);
    assert!(d.min(90.0 - d) < 0.05, "{got:?}");

    let (status, _, _) = send(&app, Method::POST, "/register/auto", Some(json!({ "bogus": 1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_patches_never_tear_state() {
    let f = fixture(240, false);
    let app = app(&f.project);
    let mut tasks = Vec::new();
    for k in 1..=20 {
        let writer = app.clone();
        tasks.push(tokio::spawn(async move {
            // Both fields always move together.
            let v = k as f64;
            let (status, _) = patch(&writer, json!({ "set": { "dx": v, "dy": -v } })).await;
            assert_eq!(status, StatusCode::OK);
        }));
        let reader = app.clone();
        tasks.push(tokio::spawn(async move {
            let s = state(&reader).await;
            let p = s.params.unwrap();
            if s.revision > 0 {
                assert_eq!(p.dx, -p.dy, "torn read at revision {}", s.revision);
            }
            let (_, headers, _) = send(&reader, Method::GET, "/tile?x=0&y=0&w=32&h=32&stage=scan", None).await;
            assert!(headers.contains_key(STATE_REVISION_HEADER));
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let s = state(&app).await;
    assert_eq!(s.revision, 20);
    let p = s.params.unwrap();
    assert_eq!(p.dx, -p.dy);
}

#[tokio::test]
async fn small_rotation_shows_at_the_corners_first() {
    let f = fixture(600, false);
    let app = app(&f.project);
    let corner = "/tile?x=0&y=0&w=96&h=96&stage=screen_sim";
    let centre = "/tile?x=252&y=252&w=96&h=96&stage=screen_sim";
    let (_, _, c0) = send(&app, Method::GET, corner, None).await;
    let (_, _, m0) = send(&app, Method::GET, centre, None).await;
    let (status, _) = patch(&app, json!({ "adjust": { "rotation_deg": 0.04 } })).await;
    assert_eq!(status, StatusCode::OK);
    let (_, h1, c1) = send(&app, Method::GET, corner, None).await;
    let (_, _, m1) = send(&app, Method::GET, centre, None).await;
    assert_eq!(h1[STATE_REVISION_HEADER], "1");
    let corner_change = mean_abs_diff(&decode(&c0).2, &decode(&c1).2);
    let centre_change = mean_abs_diff(&decode(&m0).2, &decode(&m1).2);
    println!("corner {corner_change:.3}, centre {centre_change:.3}");
    assert!(corner_change > 4.0 * centre_change, "corner {corner_change} centre {centre_change}");
    assert!(centre_change < 1.0, "centre {centre_change}");
}
