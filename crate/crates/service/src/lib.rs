//! HTTP API for the operator console: browse scenes, run interactive
//! episodes and collect free-form instructions.

pub mod annotations;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::Uri;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graspbench_cli::config::{HarnessConfig, ReasonerKind};
use graspbench_core::dataset::InstructionRow;
use graspbench_core::episode::{Localizer, ReasonerSpec, SceneAssets, SceneLibrary, StopSetting};
use graspbench_core::localization::{gt_localize, LocalizerConfig, LocalizerKind};
use graspbench_core::mask::Mask;
use graspbench_core::prompting::{encode_png, render_marks, Decision};
use graspbench_core::reasoning::{Reasoner, ScriptedReasoner};
use graspbench_core::remote::RemoteClient;
use graspbench_core::scene::{ObjectId, Scene, SceneState};
use graspbench_core::seed;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use annotations::AnnotationWriter;
use session::{object_views, ObjectView, Session, SessionError, SessionSpec};

pub const DEFAULT_DEV_ORIGIN: &str = "http://localhost:5173";

const HIGHLIGHT: Rgb<u8> = Rgb([255, 220, 0]);

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub annotations: PathBuf,
    /// How long `instruct` waits before answering 202 and leaving the
    /// decision to be polled.
    pub instruct_timeout: Duration,
    /// Allowed browser origins; `*` allows any.
    pub cors_origins: Vec<String>,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            annotations: PathBuf::from("annotations.jsonl"),
            instruct_timeout: Duration::from_secs(30),
            cors_origins: vec![DEFAULT_DEV_ORIGIN.to_string()],
            static_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::EmptyInstruction | SessionError::UnknownMark(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::CONFLICT,
        };
        Self::new(status, e.code(), e.message())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")))
}

struct Inner {
    library: SceneLibrary,
    harness: HarnessConfig,
    default_localizer: Localizer,
    default_reasoner: ReasonerSpec,
    remote_localizer: Option<Arc<RemoteClient>>,
    remote_reasoner: Option<Arc<RemoteClient>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    annotations: AnnotationWriter,
    options: ServiceOptions,
}

/// Shared service state. Construct it outside the async runtime: remote
/// endpoints get blocking HTTP clients.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(harness: HarnessConfig, scenes: Vec<Arc<Scene>>, options: ServiceOptions) -> Result<Self, String> {
        let client = |cfg: &Option<graspbench_core::remote::EndpointConfig>| {
            cfg.as_ref().map(|c| RemoteClient::new(c.clone()).map(Arc::new).map_err(|e| e.to_string())).transpose()
        };
        let remote_localizer = client(&harness.localizer.endpoint)?;
        let remote_reasoner = client(&harness.reasoner.endpoint)?;
        let default_localizer = match (harness.localizer.kind, &remote_localizer) {
            (LocalizerKind::Remote, Some(c)) => Localizer::Remote(c.clone()),
            _ => harness.build_localizer().map_err(|e| e.to_string())?,
        };
        let default_reasoner = match (harness.reasoner.kind, &remote_reasoner) {
            (ReasonerKind::Remote, Some(c)) => ReasonerSpec::Remote(c.clone()),
            _ => harness.build_reasoner().map_err(|e| e.to_string())?,
        };
        let annotations = AnnotationWriter::open(&options.annotations)
            .map_err(|e| format!("{}: {e}", options.annotations.display()))?;
        Ok(Self(Arc::new(Inner {
            library: SceneLibrary::new(scenes),
            harness,
            default_localizer,
            default_reasoner,
            remote_localizer,
            remote_reasoner,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            annotations,
            options,
        })))
    }

    fn scene(&self, id: &str) -> ApiResult<(Arc<Scene>, Arc<SceneAssets>)> {
        let scene = self.0.library.scene(id).cloned();
        let assets = self.0.library.assets(id);
        scene
            .zip(assets)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownScene", format!("no scene {id:?}")))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.0
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownEpisode", format!("no episode {id:?}")))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = cors_layer(&state.0.options.cors_origins);
    let static_dir = state.0.options.static_dir.clone();
    let api = Router::new()
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}/image", get(scene_image))
        .route("/episodes", post(create_episode))
        .route("/episodes/{id}/state", get(episode_state))
        .route("/episodes/{id}/instruct", post(instruct))
        .route("/episodes/{id}/decision", get(pending_decision))
        .route("/episodes/{id}/confirm", post(confirm))
        .route("/episodes/{id}/image", get(episode_image))
        .route("/annotations", post(annotate))
        .with_state(state);
    let api = match static_dir {
        Some(dir) => api.fallback(move |uri: Uri| serve_static(dir.clone(), uri)),
        None => api.fallback(|| async { not_found() }),
    };
    api.layer(cors)
}

fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|x| x.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

/// Files under `root`; unknown paths fall back to `index.html` so the
/// console's client-side routes resolve.
async fn serve_static(root: PathBuf, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    if rel.split('/').any(|part| part == ".." || part.contains('\\')) {
        return not_found().into_response();
    }
    let mut path = root.join(rel);
    if rel.is_empty() || tokio::fs::metadata(&path).await.map(|m| m.is_dir()).unwrap_or(false) {
        path = path.join("index.html");
    }
    let path = match tokio::fs::metadata(&path).await {
        Ok(m) if m.is_file() => path,
        _ => root.join("index.html"),
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => not_found().into_response(),
    }
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE]);
    if origins.iter().any(|o| o == "*") {
        return layer.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    layer.allow_origin(AllowOrigin::list(list))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Serialize)]
struct SceneSummary {
    scene_id: String,
    width: u32,
    height: u32,
    image: String,
    objects: Vec<ObjectView>,
}

async fn list_scenes(State(app): State<AppState>) -> Json<Vec<SceneSummary>> {
    let sorted: BTreeMap<_, _> = app.0.library.scenes().iter().collect();
    Json(
        sorted
            .into_iter()
            .map(|(id, s)| SceneSummary {
                scene_id: id.clone(),
                width: s.width(),
                height: s.height(),
                image: format!("/scenes/{id}/image"),
                objects: object_views(s.objects().iter()),
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct ImageQuery {
    marks: Option<String>,
    target: Option<u32>,
}

fn flag(v: &Option<String>) -> bool {
    matches!(v.as_deref(), Some("1" | "true" | "yes"))
}

/// Draws a two-pixel outline around `mask`.
fn outline(img: &mut RgbImage, mask: &Mask, color: Rgb<u8>) {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    for (x, y) in mask.pixels() {
        let (x, y) = (x as i64, y as i64);
        let border = [(0, 1), (1, 0), (0, -1), (-1, 0)].iter().any(|(dx, dy)| !inside(x + dx, y + dy));
        if !border {
            continue;
        }
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)] {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

async fn scene_image(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Response> {
    let (scene, assets) = app.scene(&id)?;
    let mut img = assets.rgb.clone();
    if let Some(t) = q.target {
        let obj = scene.object(ObjectId(t)).ok_or_else(|| unknown_target(&id, t))?;
        outline(&mut img, &obj.modal_mask, HIGHLIGHT);
    }
    if flag(&q.marks) {
        let keypoints = gt_localize(&SceneState::new(scene.clone())).map_err(|e| ApiError::internal(e.to_string()))?;
        img =
            render_marks(&img, &keypoints, &app.0.harness.mark_style).map_err(|e| ApiError::internal(e.to_string()))?.0;
    }
    Ok(png(encode_png(&img)))
}

fn unknown_target(scene: &str, target: u32) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "UnknownTarget", format!("scene {scene:?} has no object {target}"))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Overrides {
    stop: Option<StopSetting>,
    reasoner: Option<ReasonerKind>,
    localizer: Option<LocalizerKind>,
    seed: Option<u64>,
    motion_failure_prob: Option<f64>,
    /// Decisions for a scripted reasoner, replayed in order.
    script: Option<Vec<Decision>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateEpisode {
    scene_id: String,
    target_id: Option<u32>,
    #[serde(default)]
    overrides: Overrides,
}

impl AppState {
    fn localizer(&self, kind: Option<LocalizerKind>) -> ApiResult<Localizer> {
        let l = &self.0.harness.localizer;
        Ok(match kind {
            None => self.0.default_localizer.clone(),
            Some(LocalizerKind::Gt) => Localizer::Gt,
            Some(LocalizerKind::Perturbed) => Localizer::Perturbed(LocalizerConfig {
                kind: LocalizerKind::Perturbed,
                noise_sigma_px: l.noise_sigma_px,
                dropout: l.dropout,
                duplicate_rate: l.duplicate_rate,
                seed: l.seed,
            }),
            Some(LocalizerKind::Remote) => Localizer::Remote(
                self.0
                    .remote_localizer
                    .clone()
                    .ok_or_else(|| ApiError::invalid("no remote localizer endpoint is configured"))?,
            ),
        })
    }

    fn reasoner(
        &self,
        kind: Option<ReasonerKind>,
        script: Option<Vec<Decision>>,
        key: &str,
    ) -> ApiResult<Box<dyn Reasoner>> {
        let spec = match (kind, script) {
            (None | Some(ReasonerKind::Scripted), Some(script)) => return Ok(Box::new(ScriptedReasoner::new(script))),
            (None, None) => self.0.default_reasoner.clone(),
            (Some(ReasonerKind::Oracle), _) => ReasonerSpec::Oracle,
            (Some(ReasonerKind::Scripted), None) => match &self.0.default_reasoner {
                ReasonerSpec::Scripted(book) => ReasonerSpec::Scripted(book.clone()),
                _ => return Err(ApiError::invalid("the scripted reasoner needs overrides.script")),
            },
            (Some(ReasonerKind::Remote), _) => ReasonerSpec::Remote(
                self.0
                    .remote_reasoner
                    .clone()
                    .ok_or_else(|| ApiError::invalid("no remote reasoner endpoint is configured"))?,
            ),
        };
        spec.build(key).map_err(|e| ApiError::invalid(e.to_string()))
    }
}

async fn create_episode(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: CreateEpisode = parse(&body)?;
    let (scene, assets) = app.scene(&req.scene_id)?;
    let target = match req.target_id {
        Some(t) => {
            scene.object(ObjectId(t)).ok_or_else(|| unknown_target(&req.scene_id, t))?;
            Some(ObjectId(t))
        }
        None => None,
    };
    let o = req.overrides;
    if o.motion_failure_prob.is_some_and(|q| !(0.0..=1.0).contains(&q)) {
        return Err(ApiError::invalid("motion_failure_prob must lie in [0, 1]"));
    }
    let id = format!("ep{}", app.0.next_id.fetch_add(1, Ordering::Relaxed));
    let localizer = app.localizer(o.localizer)?;
    let reasoner = app.reasoner(o.reasoner, o.script, &id)?;
    if reasoner.requires_object_hints() && !localizer.provides_hints() {
        return Err(ApiError::invalid(format!(
            "the {} reasoner needs object-tied keypoints, which the {} localizer does not provide",
            reasoner.name(),
            localizer.name()
        )));
    }
    if reasoner.name() == "oracle" && target.is_none() {
        return Err(ApiError::invalid("the oracle reasoner needs a target_id"));
    }
    let mut settings = app.0.harness.settings(o.stop.unwrap_or_else(|| app.0.harness.stop.to_vec()[0]));
    if let Some(q) = o.motion_failure_prob {
        settings.execution.motion_failure_prob = q;
    }
    let seed = o.seed.unwrap_or_else(|| seed::derive(app.0.harness.seed, &id));
    let session = Session::new(id.clone(), SessionSpec { scene, assets, target, localizer, reasoner, settings, seed });
    let view = session.view();
    app.0.sessions.lock().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(json!({ "episode_id": id, "state": view }))).into_response())
}

async fn episode_state(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let view = session.lock().unwrap().view();
    Ok(Json(view).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstructRequest {
    text: String,
}

fn pending_reply(id: &str) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "status": "pending", "poll": format!("/episodes/{id}/decision") })))
        .into_response()
}

async fn instruct(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: InstructRequest = parse(&body)?;
    let session = app.session(&id)?;
    let job = session.lock().unwrap().begin_instruct(&req.text)?;
    let shared = session.clone();
    let task = tokio::spawn(async move {
        let decided = tokio::task::spawn_blocking(move || job.run()).await.expect("decision jobs catch panics");
        let mut s = shared.lock().unwrap();
        s.finish_instruct(decided);
        s.pending_view()
    });
    // On timeout the task keeps running detached and the result is polled.
    match tokio::time::timeout(app.0.options.instruct_timeout, task).await {
        Ok(Ok(view)) => Ok(Json(view).into_response()),
        Ok(Err(e)) => Err(ApiError::internal(e.to_string())),
        Err(_) => Ok(pending_reply(&id)),
    }
}

async fn pending_decision(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let s = session.lock().unwrap();
    if s.deciding() {
        return Ok(pending_reply(&id));
    }
    match s.pending_view() {
        Some(view) => Ok(Json(view).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "NoPendingDecision", "there is no pending decision")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfirmRequest {
    accept: bool,
    #[serde(default)]
    override_mark: Option<u32>,
}

async fn confirm(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: ConfirmRequest = parse(&body)?;
    let session = app.session(&id)?;
    let job = session.lock().unwrap().begin_confirm(req.accept, req.override_mark)?;
    if let Some(job) = job {
        let done =
            tokio::task::spawn_blocking(move || job.run()).await.map_err(|e| ApiError::internal(e.to_string()))?;
        session.lock().unwrap().finish_confirm(done);
    }
    let view = session.lock().unwrap().view();
    Ok(Json(view).into_response())
}

async fn episode_image(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let bytes = session.lock().unwrap().image_png();
    Ok(png(bytes))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRequest {
    scene_id: String,
    target_id: u32,
    text: String,
}

async fn annotate(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: AnnotationRequest = parse(&body)?;
    let (scene, _) = app.scene(&req.scene_id)?;
    if scene.object(ObjectId(req.target_id)).is_none() {
        return Err(unknown_target(&req.scene_id, req.target_id));
    }
    let text = req.text.trim();
    if text.is_empty() {
        return Err(SessionError::EmptyInstruction.into());
    }
    let row = InstructionRow { scene_id: req.scene_id, target_id: req.target_id, instructions: vec![text.to_string()] };
    let lines = app.0.annotations.append(&row).await.map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(json!({ "lines": lines }))).into_response())
}
