//! HTTP view over a completed run directory: scene download, curve-handle
//! deformation and asynchronous keypoint refinement (one job at a time).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use curvesketch::curves::CurveSet;
use curvesketch::deform::{apply_deformation, build_skinning, displace_handles, SkinningWeights, DEFAULT_K, DEFAULT_SAMPLES_PER_CURVE, DEFAULT_TEMPERATURE};
use curvesketch::keypoints::{load_keypoints, save_keypoints, snap_keypoints, Keypoint};
use curvesketch::perception::EncoderRegistry;
use curvesketch::pipeline::{self, RunConfig, Scene, StageControl};
use curvesketch::{Error, Result, Vec3};
use serde::{Deserialize, Serialize};

use crate::rundir::RunDir;

const LOG_TAIL: usize = 50;

pub const SKINNING_LAYOUT: &str = "little-endian: u32 handle_count, u32 vertex_count, u32 k, f32 temperature; \
per handle u32 curve, f32 t, f32 x, f32 y, f32 z; vertex_count*k u32 handle indices; vertex_count*k f32 weights";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    FitSdf,
    DetectKeypoints,
    RenderTargets,
    Abstract,
    Refine,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction in [0, 1].
    pub progress: f64,
    pub artifacts: Vec<String>,
    pub log: Vec<String>,
}

impl Job {
    fn new(id: String, kind: JobKind) -> Self {
        Self {
            id,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            artifacts: Vec::new(),
            log: Vec::new(),
        }
    }

    /// Transitions only move forward.
    fn advance(&mut self, to: JobState) {
        if to > self.state && !self.state.is_finished() {
            self.state = to;
        }
    }

    fn note(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
        if self.log.len() > LOG_TAIL {
            self.log.drain(..self.log.len() - LOG_TAIL);
        }
    }
}

/// Curves and the skinning derived from them, swapped atomically when a
/// refinement finishes.
pub struct Snapshot {
    pub curves: CurveSet,
    pub keypoints: Vec<Keypoint>,
    pub skinning: SkinningWeights,
}

impl Snapshot {
    pub fn build(scene: &Scene, curves: CurveSet, keypoints: Vec<Keypoint>) -> Result<Self> {
        let skinning = build_skinning(&scene.mesh, &curves, DEFAULT_SAMPLES_PER_CURVE, DEFAULT_TEMPERATURE, DEFAULT_K)?;
        Ok(Self { curves, keypoints, skinning })
    }
}

#[derive(Default)]
struct JobBoard {
    next: u64,
    jobs: HashMap<String, Arc<Mutex<Job>>>,
    active: Option<Arc<Mutex<Job>>>,
}

pub struct AppState {
    pub run: RunDir,
    pub cfg: RunConfig,
    pub scene: Arc<Scene>,
    pub registry: Arc<EncoderRegistry>,
    snapshot: RwLock<Arc<Snapshot>>,
    jobs: Mutex<JobBoard>,
}

impl AppState {
    /// Loads the scene and the run's latest curves.
    pub fn open(run: RunDir, cfg: RunConfig) -> Result<Self> {
        let scene = run.scene(&cfg)?;
        let curves = CurveSet::load(run.curves())?;
        let keypoints = if run.keypoints().exists() { load_keypoints(run.keypoints())? } else { Vec::new() };
        Self::with_scene(run, cfg, scene, curves, keypoints)
    }

    pub fn with_scene(run: RunDir, cfg: RunConfig, scene: Scene, curves: CurveSet, keypoints: Vec<Keypoint>) -> Result<Self> {
        let snapshot = Snapshot::build(&scene, curves, keypoints)?;
        Ok(Self {
            registry: Arc::new(cfg.registry()),
            run,
            cfg,
            scene: Arc::new(scene),
            snapshot: RwLock::new(Arc::new(snapshot)),
            jobs: Mutex::new(JobBoard::default()),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        let board = self.jobs.lock().expect("job lock");
        board.jobs.get(id).map(|j| j.lock().expect("job lock").clone())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scene", get(scene))
        .route("/keypoints", post(post_keypoints))
        .route("/jobs/{id}", get(get_job))
        .route("/deform", post(deform))
        .with_state(state)
}

pub async fn serve(run: RunDir, cfg: RunConfig, addr: SocketAddr) -> Result<()> {
    let root = run.root().to_path_buf();
    let state = tokio::task::spawn_blocking(move || AppState::open(run, cfg))
        .await
        .map_err(|e| Error::InvalidArgument(format!("scene loading panicked: {e}")))??;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(&root, e))?;
    log::info!("serving {} on http://{addr}", root.display());
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(&root, e))
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: String,
}

fn reply(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ApiError { error: message.into() })).into_response()
}

fn schema_error(r: JsonRejection) -> Response {
    reply(StatusCode::UNPROCESSABLE_ENTITY, r.body_text())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeshBody {
    pub positions: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SkinningBody {
    pub encoding: String,
    pub layout: String,
    pub handles: usize,
    pub vertices: usize,
    pub k: usize,
    pub byte_length: usize,
    pub data: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneBody {
    pub mesh: MeshBody,
    pub curves: CurveSet,
    pub keypoints: Vec<Keypoint>,
    pub skinning: SkinningBody,
}

async fn scene(State(st): State<Arc<AppState>>) -> Json<SceneBody> {
    let snap = st.snapshot();
    let blob = snap.skinning.to_blob();
    Json(SceneBody {
        mesh: MeshBody {
            positions: st.scene.mesh.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: st.scene.mesh.faces.clone(),
        },
        curves: snap.curves.clone(),
        keypoints: snap.keypoints.clone(),
        skinning: SkinningBody {
            encoding: "base64".into(),
            layout: SKINNING_LAYOUT.into(),
            handles: snap.skinning.handles.len(),
            vertices: snap.skinning.vertex_count,
            k: snap.skinning.k,
            byte_length: blob.len(),
            data: base64::engine::general_purpose::STANDARD.encode(&blob),
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointsRequest {
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job: String,
}

async fn post_keypoints(State(st): State<Arc<AppState>>, body: std::result::Result<Json<KeypointsRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return schema_error(r),
    };
    if req.keypoints.is_empty() {
        return reply(StatusCode::UNPROCESSABLE_ENTITY, "at least one keypoint is required");
    }
    if req.keypoints.iter().any(|k| !k.position.iter().all(|c| c.is_finite())) {
        return reply(StatusCode::UNPROCESSABLE_ENTITY, "keypoint coordinates must be finite");
    }
    let job = {
        let mut board = st.jobs.lock().expect("job lock");
        if let Some(active) = &board.active {
            let a = active.lock().expect("job lock");
            if !a.state.is_finished() {
                return reply(StatusCode::CONFLICT, format!("job {} is still {:?}", a.id, a.state).to_lowercase());
            }
        }
        board.next += 1;
        let id = format!("job-{}", board.next);
        let job = Arc::new(Mutex::new(Job::new(id.clone(), JobKind::Refine)));
        board.jobs.insert(id, job.clone());
        board.active = Some(job.clone());
        job
    };
    let id = job.lock().expect("job lock").id.clone();
    let worker = st.clone();
    tokio::task::spawn_blocking(move || run_refinement(&worker, &job, req.keypoints));
    (StatusCode::ACCEPTED, Json(JobCreated { job: id })).into_response()
}

fn run_refinement(st: &AppState, job: &Arc<Mutex<Job>>, mut keypoints: Vec<Keypoint>) {
    {
        let mut j = job.lock().expect("job lock");
        j.advance(JobState::Running);
        j.note(format!("refining around {} keypoint(s)", keypoints.len()));
    }
    let progress_job = job.clone();
    let control = StageControl {
        checkpoint: Some(st.run.refine_checkpoint()),
        progress: Some(Arc::new(move |done, total| {
            let mut j = progress_job.lock().expect("job lock");
            j.progress = done as f64 / total.max(1) as f64;
            if done % 25 == 0 || done == total {
                j.note(format!("iteration {done}/{total}"));
            }
        })),
        ..StageControl::default()
    };
    let result = (|| -> Result<Vec<String>> {
        snap_keypoints(&mut keypoints, &st.scene.oracle);
        let base = st.snapshot();
        let out = pipeline::refine(&st.scene, &st.cfg, &st.registry, &base.curves, keypoints.clone(), &control)?;
        let mut all = base.keypoints.clone();
        all.extend(keypoints);
        out.curves.save(st.run.curves())?;
        save_keypoints(&all, st.run.keypoints())?;
        let snap = Snapshot::build(&st.scene, out.curves, all)?;
        let count = snap.curves.len();
        *st.snapshot.write().expect("snapshot lock") = Arc::new(snap);
        log::info!("refinement finished with {count} curves");
        Ok(vec![st.run.curves().display().to_string(), st.run.keypoints().display().to_string()])
    })();
    let mut j = job.lock().expect("job lock");
    match result {
        Ok(artifacts) => {
            j.artifacts = artifacts;
            j.progress = 1.0;
            j.note("done");
            j.advance(JobState::Done);
        }
        Err(e) => {
            j.note(format!("failed: {e}"));
            j.advance(JobState::Failed);
        }
    }
}

async fn get_job(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match st.job(&id) {
        Some(j) => Json(j).into_response(),
        None => reply(StatusCode::NOT_FOUND, format!("no job `{id}`")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformRequest {
    /// Edited control points for every curve, in curve order.
    pub curves: Vec<[[f64; 3]; 4]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DeformResponse {
    pub vertices: Vec<[f64; 3]>,
}

/// Deformed vertex positions for edited control points; the computation
/// behind `POST /deform`.
pub fn deform_vertices(mesh: &curvesketch::geometry::Mesh, snap: &Snapshot, edited: &[[[f64; 3]; 4]]) -> Result<Vec<[f64; 3]>> {
    if edited.len() != snap.curves.len() {
        return Err(Error::ShapeMismatch(format!("expected {} curves, got {}", snap.curves.len(), edited.len())));
    }
    let mut cs = snap.curves.clone();
    for (c, pts) in cs.curves.iter_mut().zip(edited) {
        for (cp, p) in c.control_points.iter_mut().zip(pts) {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidArgument("control points must be finite".into()));
            }
            *cp = Vec3::from(*p);
        }
    }
    let disp = displace_handles(&snap.curves, &cs, &snap.skinning.handles)?;
    let m = apply_deformation(mesh, &snap.skinning, &disp)?;
    Ok(m.vertices.iter().map(|v| [v.x, v.y, v.z]).collect())
}

async fn deform(State(st): State<Arc<AppState>>, body: std::result::Result<Json<DeformRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return schema_error(r),
    };
    let snap = st.snapshot();
    match deform_vertices(&st.scene.mesh, &snap, &req.curves) {
        Ok(vertices) => Json(DeformResponse { vertices }).into_response(),
        Err(e) => reply(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}
