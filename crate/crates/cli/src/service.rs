//! Local HTTP service driving interactive registration.
//!
//! One mutable session per process. Mutations take the write lock; reads
//! copy a snapshot under the read lock and render outside it, so every
//! response reflects one consistent state.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::Matrix3;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rescreen_core::colorimetry::IlluminantName;
use rescreen_core::geometry::{nyquist_gate, Adjustment, DecomposedParams, Distortion, MapRecord, RegistrationMap, ScanFrame};
use rescreen_core::preview::{tile_png, PreviewError, PreviewInputs, PreviewStage, TileRequest};
use rescreen_core::project::{output_matrix, LoadedProject, Project, ProjectError, RunReport};
use rescreen_core::raster::{LinearRaster, Rect};
use rescreen_core::registration::{auto_register, AutoOptions, RegistrationError, RegistrationReport};
use rescreen_core::render::{DetailParams, Interpolation, OutputSpace, RenderMode, RenderParams};
use rescreen_core::screen::{ProcessId, ScreenPattern};

pub const STATE_REVISION_HEADER: &str = "x-state-revision";
pub const STATE_HASH_HEADER: &str = "x-state-hash";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Preview(#[from] PreviewError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Preview(PreviewError::Unregistered) | ServiceError::Project(ProjectError::Unregistered) => {
                StatusCode::CONFLICT
            }
            ServiceError::Preview(PreviewError::Render(_) | PreviewError::Encode(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::Preview(_) => StatusCode::BAD_REQUEST,
            ServiceError::Registration(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Project(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

/// The project being edited plus the derived data tiles need.
pub struct Session {
    path: PathBuf,
    loaded: LoadedProject,
    saved: Project,
    map: Option<RegistrationMap>,
    scan: Arc<LinearRaster>,
    positive: Arc<LinearRaster>,
    pattern: Arc<ScreenPattern>,
    matrix: Matrix3<f64>,
    revision: u64,
}

/// Everything one read needs, copied out of the session.
#[derive(Clone)]
pub struct Snapshot {
    pub revision: u64,
    pub hash: String,
    pub scan: Arc<LinearRaster>,
    pub positive: Arc<LinearRaster>,
    pub pattern: Arc<ScreenPattern>,
    pub map: Option<RegistrationMap>,
    pub render: RenderParams,
    pub matrix: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanInfo {
    pub width: usize,
    pub height: usize,
    pub ppi: f64,
}

/// Body of `GET /state` and of every mutation's response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub revision: u64,
    /// Changes whenever anything a tile depends on changes.
    pub state_hash: String,
    /// The edited state differs from the project file.
    pub dirty: bool,
    pub project: PathBuf,
    pub process_id: ProcessId,
    pub scan: ScanInfo,
    pub registered: bool,
    pub params: Option<DecomposedParams>,
    pub px_per_patch: Option<f64>,
    pub nyquist_ok: Option<bool>,
    pub map: Option<MapRecord>,
    pub render: RenderParams,
    pub illuminant: IlluminantName,
}

/// Fields of the decomposed registration, each optional.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsPatch {
    pub rotation_deg: Option<f64>,
    pub scale_x: Option<f64>,
    pub scale_y: Option<f64>,
    pub shear: Option<f64>,
    pub dx: Option<f64>,
    pub dy: Option<f64>,
    pub persp_x: Option<f64>,
    pub persp_y: Option<f64>,
    pub k1: Option<f64>,
    pub k2: Option<f64>,
}

impl ParamsPatch {
    fn fields(&self) -> [Option<f64>; 10] {
        [
            self.rotation_deg,
            self.scale_x,
            self.scale_y,
            self.shear,
            self.dx,
            self.dy,
            self.persp_x,
            self.persp_y,
            self.k1,
            self.k2,
        ]
    }

    fn is_empty(&self) -> bool {
        self.fields().iter().all(Option::is_none)
    }

    fn apply(&self, p: &mut DecomposedParams, delta: bool) -> Result<(), ServiceError> {
        let targets: [&mut f64; 10] = [
            &mut p.rotation_deg,
            &mut p.scale_x,
            &mut p.scale_y,
            &mut p.shear,
            &mut p.dx,
            &mut p.dy,
            &mut p.persp_x,
            &mut p.persp_y,
            &mut p.k1,
            &mut p.k2,
        ];
        for (t, v) in targets.into_iter().zip(self.fields()) {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(ServiceError::BadRequest(format!("non-finite parameter {v}")));
                }
                *t = if delta { *t + v } else { v };
            }
        }
        Ok(())
    }
}

/// Render fields, each optional.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderPatch {
    pub exposure: Option<f64>,
    pub white_balance: Option<[f64; 3]>,
    pub saturation: Option<f64>,
    pub output_space: Option<OutputSpace>,
    pub mode: Option<RenderMode>,
    pub interpolation: Option<Interpolation>,
    pub detail: Option<DetailParams>,
}

impl RenderPatch {
    fn apply(&self, r: &mut RenderParams) {
        let RenderPatch {
            exposure,
            white_balance,
            saturation,
            output_space,
            mode,
            interpolation,
            detail,
        } = *self;
        r.exposure = exposure.unwrap_or(r.exposure);
        r.white_balance = white_balance.unwrap_or(r.white_balance);
        r.saturation = saturation.unwrap_or(r.saturation);
        r.output_space = output_space.unwrap_or(r.output_space);
        r.mode = mode.unwrap_or(r.mode);
        r.interpolation = interpolation.unwrap_or(r.interpolation);
        r.detail = detail.unwrap_or(r.detail);
    }
}

/// Body of `PATCH /state`. Applied in order: `set`, `delta`, then `adjust`
/// about the principal point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatePatch {
    pub set: ParamsPatch,
    pub delta: ParamsPatch,
    pub adjust: Option<Adjustment>,
    pub render: RenderPatch,
    pub illuminant: Option<IlluminantName>,
    /// Drop the map.
    pub unregister: bool,
}

impl Session {
    /// Loads a project and prepares its positive.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let path = path.into();
        let loaded = Project::load(&path)?;
        let prepared = loaded.prepare(&mut RunReport::default())?;
        let pattern = loaded.pattern()?;
        let map = loaded.project.map()?;
        let p = &loaded.project;
        let matrix = output_matrix(&pattern, p.color.illuminant, p.render.output_space)?;
        Ok(Self {
            path,
            saved: loaded.project.clone(),
            loaded,
            map,
            scan: Arc::new(prepared.scan),
            positive: Arc::new(prepared.positive),
            pattern: Arc::new(pattern),
            matrix,
            revision: 0,
        })
    }

    fn hash(&self) -> String {
        let p = &self.loaded.project;
        let key = serde_json::to_string(&(&p.registration, &p.render, &p.color)).expect("state serializes");
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        format!("{:016x}", h.finish())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            revision: self.revision,
            hash: self.hash(),
            scan: self.scan.clone(),
            positive: self.positive.clone(),
            pattern: self.pattern.clone(),
            map: self.map.clone(),
            render: self.loaded.project.render,
            matrix: self.matrix,
        }
    }

    pub fn view(&self) -> StateView {
        let p = &self.loaded.project;
        let gate = self
            .map
            .as_ref()
            .map(|m| nyquist_gate(m, &self.pattern, &self.positive));
        StateView {
            revision: self.revision,
            state_hash: self.hash(),
            dirty: *p != self.saved,
            project: self.path.clone(),
            process_id: p.process_id,
            scan: ScanInfo {
                width: self.positive.width(),
                height: self.positive.height(),
                ppi: self.positive.ppi(),
            },
            registered: self.map.is_some(),
            params: self.map.as_ref().map(DecomposedParams::from_map),
            px_per_patch: gate.map(|g| g.px_per_patch()),
            nyquist_ok: gate.map(|g| g.is_ok()),
            map: self.map.as_ref().map(MapRecord::from),
            render: p.render,
            illuminant: p.color.illuminant,
        }
    }

    /// Parameters an unregistered scan starts from: the nominal period,
    /// no rotation, origin at the top-left corner.
    fn nominal_params(&self) -> DecomposedParams {
        let period = self.positive.ppi() / 25.4 * self.pattern.tile_period_mm();
        DecomposedParams {
            scale_x: period,
            scale_y: period,
            ..DecomposedParams::default()
        }
    }

    /// Applies a patch atomically: on error nothing changes.
    pub fn apply(&mut self, patch: &StatePatch) -> Result<(), ServiceError> {
        let mut project = self.loaded.project.clone();
        let mut map = self.map.clone();
        if patch.unregister {
            map = None;
        }
        if !patch.set.is_empty() || !patch.delta.is_empty() || patch.adjust.is_some() {
            let mut params = map.as_ref().map_or_else(|| self.nominal_params(), DecomposedParams::from_map);
            patch.set.apply(&mut params, false)?;
            patch.delta.apply(&mut params, true)?;
            let d = Distortion {
                k1: params.k1,
                k2: params.k2,
            };
            let base = map.unwrap_or_else(|| RegistrationMap::identity(ScanFrame::of(&self.positive)));
            let mut h = params.to_homography();
            if let Some(a) = patch.adjust {
                h = a.apply(&h, base.principal_point());
                h /= h[(2, 2)];
            }
            let next = base
                .with_parts(h, d)
                .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            map = Some(next);
        }
        patch.render.apply(&mut project.render);
        project
            .render
            .validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if let Some(ill) = patch.illuminant {
            project.color.illuminant = ill;
        }
        let matrix = output_matrix(&self.pattern, project.color.illuminant, project.render.output_space)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        project.set_map(map.as_ref());

        self.loaded.project = project;
        self.map = map;
        self.matrix = matrix;
        self.revision += 1;
        Ok(())
    }

    pub fn set_map(&mut self, map: RegistrationMap) {
        self.loaded.project.set_map(Some(&map));
        self.map = Some(map);
        self.revision += 1;
    }

    /// Writes the edited state to the project file.
    pub fn save(&mut self) -> Result<(), ServiceError> {
        self.loaded.project.save(&self.path)?;
        self.saved = self.loaded.project.clone();
        Ok(())
    }
}

pub type Shared = Arc<RwLock<Session>>;

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/state", get(get_state).patch(patch_state))
        .route("/tile", get(get_tile))
        .route("/register/auto", post(register_auto))
        .route("/save", post(save))
        .with_state(Arc::new(RwLock::new(session)))
}

async fn get_state(State(s): State<Shared>) -> Json<StateView> {
    Json(s.read().view())
}

/// Parses a JSON body; an empty body is the type's default.
fn parse_body<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

async fn patch_state(State(s): State<Shared>, body: Bytes) -> Result<Json<StateView>, ServiceError> {
    let patch: StatePatch = parse_body(&body)?;
    let mut guard = s.write();
    guard.apply(&patch)?;
    Ok(Json(guard.view()))
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct TileQuery {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    #[serde(default = "one")]
    pub zoom: usize,
    #[serde(default)]
    pub stage: PreviewStage,
}

fn one() -> usize {
    1
}

async fn get_tile(State(s): State<Shared>, Query(q): Query<TileQuery>) -> Result<Response, ServiceError> {
    let snap = s.read().snapshot();
    let req = TileRequest {
        stage: q.stage,
        viewport: Rect::new(q.x, q.y, q.w, q.h),
        zoom: q.zoom,
    };
    let (revision, hash) = (snap.revision, snap.hash.clone());
    let png = tokio::task::spawn_blocking(move || {
        let inputs = PreviewInputs {
            scan: &snap.scan,
            positive: &snap.positive,
            pattern: &snap.pattern,
            map: snap.map.as_ref(),
            render: &snap.render,
            matrix: &snap.matrix,
        };
        tile_png(&inputs, &req)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let mut resp = png.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(STATE_REVISION_HEADER, HeaderValue::from(revision));
    headers.insert(STATE_HASH_HEADER, HeaderValue::from_str(&hash).expect("hex is a valid header"));
    Ok(resp)
}

/// Body of `POST /register/auto`; every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoRequest {
    pub use_marks: bool,
    pub nominal_ppi: Option<f64>,
}

impl Default for AutoRequest {
    fn default() -> Self {
        Self {
            use_marks: true,
            nominal_ppi: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoResponse {
    pub report: RegistrationReport,
    pub report_text: String,
    pub state: StateView,
}

async fn register_auto(State(s): State<Shared>, body: Bytes) -> Result<Json<AutoResponse>, ServiceError> {
    let req: AutoRequest = parse_body(&body)?;
    let snap = s.read().snapshot();
    let options = AutoOptions {
        nominal_ppi: req.nominal_ppi,
        use_marks: req.use_marks,
        ..AutoOptions::default()
    };
    let result = tokio::task::spawn_blocking(move || auto_register(&snap.positive, &snap.pattern, &options))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let mut guard = s.write();
    guard.set_map(result.map);
    Ok(Json(AutoResponse {
        report_text: result.report.to_text(),
        report: result.report,
        state: guard.view(),
    }))
}

async fn save(State(s): State<Shared>) -> Result<Json<StateView>, ServiceError> {
    let mut guard = s.write();
    guard.save()?;
    Ok(Json(guard.view()))
}
