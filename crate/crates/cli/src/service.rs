//! What-if screening service: scenario submission, a rollout worker pool and
//! read endpoints over content-addressed run directories.

use crate::error::{CliError, CliResult};
use aerograph_core::archive::RolloutArchive;
use aerograph_core::consts::HISTORY;
use aerograph_core::eval::EvalReport;
use aerograph_core::mesh::EulerianGraph;
use aerograph_core::nn::model::Normalizer;
use aerograph_core::nn::{Model, Variant};
use aerograph_core::refsim::{generate_case, CaseSpec};
use aerograph_core::rollout::{rollout, RolloutConfig};
use aerograph_core::training::{toy_graph, TrainConfig};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

pub const DATA_DIR_ENV: &str = "AEROGRAPH_DATA_DIR";
/// Id of the built-in zero-acceleration model.
pub const BASELINE_CHECKPOINT: &str = "baseline";

pub const V_IN_RANGE: (f64, f64) = (0.05, 1.0);
pub const U_MAG_RANGE: (f64, f64) = (5.0, 60.0);
pub const THETA_RANGE: (f64, f64) = (5.0, 45.0);

const REFERENCE_FILE: &str = "reference.elgn";
const PREDICTION_FILE: &str = "prediction.elgn";
const METRICS_FILE: &str = "metrics.json";
const BZE_FILE: &str = "bze.json";
const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub workers: usize,
    pub checkpoints: Vec<PathBuf>,
    /// Checkpoint id used when a scenario names none; the first loaded
    /// checkpoint, else the baseline.
    pub default_checkpoint: Option<String>,
    pub data_dir: Option<PathBuf>,
    /// Parcels tracked per scenario.
    pub n_parcels: usize,
    /// Reference frames per scenario.
    pub n_frames: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let c = CaseSpec::toy(0.10, 0);
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            workers: 1,
            checkpoints: Vec::new(),
            default_checkpoint: None,
            data_dir: None,
            n_parcels: c.n_tracked,
            n_frames: c.n_frames,
        }
    }
}

/// Explicit directory, else `$AEROGRAPH_DATA_DIR`, else `./aerograph-data`.
pub fn resolve_data_dir(explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .or_else(|| Some(PathBuf::from("aerograph-data")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRequest {
    #[serde(rename = "V_in")]
    pub v_in: f64,
    #[serde(rename = "U_mag")]
    pub u_mag: f64,
    pub theta: f64,
    pub seed: u64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field_err(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

impl ScenarioRequest {
    /// Field-by-field parse so that every problem is reported at once.
    pub fn parse(body: &[u8]) -> Result<Self, Vec<FieldError>> {
        let v: Value = serde_json::from_slice(body).map_err(|e| vec![field_err("body", format!("invalid JSON: {e}"))])?;
        let obj = v.as_object().ok_or_else(|| vec![field_err("body", "expected a JSON object")])?;
        let mut errs = Vec::new();
        for k in obj.keys() {
            if !matches!(k.as_str(), "V_in" | "U_mag" | "theta" | "seed" | "checkpoint") {
                errs.push(field_err(k, "unknown field"));
            }
        }
        let mut num = |name: &str, (lo, hi): (f64, f64)| -> f64 {
            match obj.get(name) {
                None => {
                    errs.push(field_err(name, "required"));
                    f64::NAN
                }
                Some(x) => match x.as_f64() {
                    Some(f) if f >= lo && f <= hi => f,
                    Some(_) => {
                        errs.push(field_err(name, format!("must lie in [{lo}, {hi}]")));
                        f64::NAN
                    }
                    None => {
                        errs.push(field_err(name, "must be a number"));
                        f64::NAN
                    }
                },
            }
        };
        let v_in = num("V_in", V_IN_RANGE);
        let u_mag = num("U_mag", U_MAG_RANGE);
        let theta = num("theta", THETA_RANGE);
        let seed = match obj.get("seed") {
            None | Some(Value::Null) => 0,
            Some(x) => x.as_u64().unwrap_or_else(|| {
                errs.push(field_err("seed", "must be a nonnegative integer"));
                0
            }),
        };
        let checkpoint = match obj.get("checkpoint") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                errs.push(field_err("checkpoint", "must be a string"));
                None
            }
        };
        if errs.is_empty() {
            Ok(Self {
                v_in,
                u_mag,
                theta,
                seed,
                checkpoint,
            })
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub status: RunStatus,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunInfo {
    fn at(status: RunStatus, progress: f64) -> Self {
        Self {
            status,
            progress,
            error: None,
        }
    }
}

struct Job {
    run_id: String,
    req: ScenarioRequest,
}

pub struct AppState {
    pub cfg: ServeConfig,
    pub data_dir: PathBuf,
    runs: Mutex<HashMap<String, RunInfo>>,
    queue: Mutex<mpsc::Sender<Job>>,
    checkpoints: BTreeMap<String, Arc<Vec<u8>>>,
    default_checkpoint: String,
    graph: EulerianGraph,
    jobs: Mutex<mpsc::Receiver<Job>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn baseline_model() -> CliResult<Model> {
    let cfg = TrainConfig::toy(Variant::M0, 0).model_config();
    Ok(Model::new(cfg, Normalizer::default(), 0)?)
}

impl AppState {
    /// Loads checkpoints and starts the worker threads. With zero workers
    /// submitted runs stay queued.
    pub fn start(mut cfg: ServeConfig) -> CliResult<Arc<Self>> {
        if cfg.n_frames <= HISTORY {
            return Err(CliError::other("config", format!("n_frames must exceed {HISTORY}")));
        }
        let data_dir = resolve_data_dir(cfg.data_dir.take()).expect("default data dir");
        cfg.data_dir = Some(data_dir.clone());
        std::fs::create_dir_all(data_dir.join("runs"))
            .map_err(|e| CliError::other("io", format!("{}: {e}", data_dir.display())))?;
        let mut checkpoints = BTreeMap::new();
        let mut first = None;
        for p in &cfg.checkpoints {
            let bytes = std::fs::read(p).map_err(|e| CliError::not_found(format!("{}: {e}", p.display())))?;
            Model::from_bytes(&bytes)?;
            let id = sha256_hex(&bytes)[..16].to_string();
            log::info!("checkpoint {} -> {id}", p.display());
            first.get_or_insert_with(|| id.clone());
            checkpoints.insert(id, Arc::new(bytes));
        }
        checkpoints.insert(BASELINE_CHECKPOINT.to_string(), Arc::new(baseline_model()?.to_bytes()?));
        let default_checkpoint = cfg
            .default_checkpoint
            .clone()
            .or(first)
            .unwrap_or_else(|| BASELINE_CHECKPOINT.to_string());
        if !checkpoints.contains_key(&default_checkpoint) {
            return Err(CliError::other("config", format!("unknown default checkpoint {default_checkpoint}")));
        }
        let (tx, rx) = mpsc::channel::<Job>();
        let state = Arc::new(Self {
            graph: toy_graph()?,
            cfg,
            data_dir,
            runs: Mutex::new(HashMap::new()),
            queue: Mutex::new(tx),
            checkpoints,
            default_checkpoint,
            jobs: Mutex::new(rx),
        });
        for w in 0..state.cfg.workers {
            let st = state.clone();
            std::thread::Builder::new()
                .name(format!("rollout-{w}"))
                .spawn(move || loop {
                    let job = match st.jobs.lock().expect("queue lock").recv() {
                        Ok(j) => j,
                        Err(_) => return,
                    };
                    st.execute(job);
                })
                .map_err(|e| CliError::other("io", e.to_string()))?;
        }
        Ok(state)
    }

    pub fn checkpoint_ids(&self) -> Vec<String> {
        self.checkpoints.keys().cloned().collect()
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join("runs").join(id)
    }

    /// Hash of everything that determines a run's outputs.
    pub fn run_id(&self, req: &ScenarioRequest) -> String {
        let key = json!({
            "V_in": req.v_in,
            "U_mag": req.u_mag,
            "theta": req.theta,
            "seed": req.seed,
            "checkpoint": req.checkpoint,
            "n_parcels": self.cfg.n_parcels,
            "n_frames": self.cfg.n_frames,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    /// Case spec of a scenario on the coarse room grid.
    pub fn scenario_case(&self, req: &ScenarioRequest) -> CaseSpec {
        let base = CaseSpec::toy(req.v_in, req.seed);
        CaseSpec {
            name: "scenario".into(),
            u_mag: req.u_mag,
            theta: req.theta,
            n_tracked: self.cfg.n_parcels,
            n_frames: self.cfg.n_frames,
            duration: base.t_start + self.cfg.n_frames as f64 * base.save_interval,
            ..base
        }
    }

    fn set(&self, id: &str, info: RunInfo) {
        self.runs.lock().expect("registry lock").insert(id.to_string(), info);
    }

    fn completed_on_disk(&self, id: &str) -> bool {
        let d = self.run_dir(id);
        d.join(METRICS_FILE).is_file() && d.join(BZE_FILE).is_file()
    }

    /// Registry entry, falling back to a finished run directory.
    pub fn lookup(&self, id: &str) -> Option<RunInfo> {
        if id.len() != 64 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        let mut runs = self.runs.lock().expect("registry lock");
        if let Some(r) = runs.get(id) {
            return Some(r.clone());
        }
        if self.completed_on_disk(id) {
            let r = RunInfo::at(RunStatus::Done, 1.0);
            runs.insert(id.to_string(), r.clone());
            return Some(r);
        }
        None
    }

    /// Registers a scenario and queues it unless an identical run exists.
    pub fn submit(&self, mut req: ScenarioRequest) -> Result<(String, RunInfo), Vec<FieldError>> {
        let ck = req.checkpoint.get_or_insert_with(|| self.default_checkpoint.clone());
        if !self.checkpoints.contains_key(ck.as_str()) {
            return Err(vec![field_err(
                "checkpoint",
                format!("unknown checkpoint; available: {}", self.checkpoint_ids().join(", ")),
            )]);
        }
        let id = self.run_id(&req);
        let mut runs = self.runs.lock().expect("registry lock");
        match runs.get(&id) {
            Some(r) if r.status != RunStatus::Failed => return Ok((id, r.clone())),
            _ => {}
        }
        if self.completed_on_disk(&id) {
            let r = RunInfo::at(RunStatus::Done, 1.0);
            runs.insert(id.clone(), r.clone());
            return Ok((id, r));
        }
        let r = RunInfo::at(RunStatus::Queued, 0.0);
        runs.insert(id.clone(), r.clone());
        drop(runs);
        let job = Job { run_id: id.clone(), req };
        if self.queue.lock().expect("queue lock").send(job).is_err() {
            self.set(
                &id,
                RunInfo {
                    error: Some("worker pool stopped".into()),
                    ..RunInfo::at(RunStatus::Failed, 0.0)
                },
            );
        }
        Ok((id, r))
    }

    fn execute(&self, job: Job) {
        let id = job.run_id.clone();
        self.set(&id, RunInfo::at(RunStatus::Running, 0.0));
        match self.pipeline(&job) {
            Ok(()) => self.set(&id, RunInfo::at(RunStatus::Done, 1.0)),
            Err(e) => {
                log::warn!("run {id} failed: {e}");
                self.set(
                    &id,
                    RunInfo {
                        error: Some(e.message),
                        ..RunInfo::at(RunStatus::Failed, 0.0)
                    },
                );
            }
        }
    }

    /// Reference synthesis, rollout and evaluation into the run directory.
    fn pipeline(&self, job: &Job) -> CliResult<()> {
        let dir = self.run_dir(&job.run_id);
        let io = |p: &Path, e: std::io::Error| CliError::other("io", format!("{}: {e}", p.display()));
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let scen = dir.join(SCENARIO_FILE);
        std::fs::write(&scen, serde_json::to_string_pretty(&job.req)?).map_err(|e| io(&scen, e))?;

        let spec = self.scenario_case(&job.req);
        let reference = generate_case(&spec, &self.graph)?;
        reference.save(&dir.join(REFERENCE_FILE))?;
        self.set(&job.run_id, RunInfo::at(RunStatus::Running, 0.4));

        let ck = job.req.checkpoint.as_deref().unwrap_or(&self.default_checkpoint);
        let model = Model::from_bytes(&self.checkpoints[ck])?;
        let rc = RolloutConfig {
            n_steps: reference.frames.len() - HISTORY,
            seed: job.req.seed,
            ..RolloutConfig::default()
        };
        let outcome = rollout(&model, &self.graph, &reference, &rc)?;
        if let Some(d) = &outcome.diagnostic {
            log::warn!("run {}: {d}", job.run_id);
        }
        outcome.archive.save(&dir.join(PREDICTION_FILE))?;
        self.set(&job.run_id, RunInfo::at(RunStatus::Running, 0.8));

        let report = EvalReport::build(&outcome.archive, &reference)?;
        report.write(&dir)?;
        let s = &report.series;
        let bze = json!({
            "time": s.time,
            "bze_pred": s.bze_pred,
            "bze_ref": s.bze_gt,
        });
        // Written last: its presence marks a finished run.
        let tmp = dir.join("bze.json.tmp");
        std::fs::write(&tmp, bze.to_string()).map_err(|e| io(&tmp, e))?;
        std::fs::rename(&tmp, dir.join(BZE_FILE)).map_err(|e| io(&tmp, e))?;
        Ok(())
    }
}

fn error_response(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    let body = json!({ "error": { "kind": kind, "message": message.into() } });
    (status, Json(body)).into_response()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn unknown_run(id: &str) -> Response {
    error_response(StatusCode::NOT_FOUND, "not_found", format!("unknown run {id}"))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn post_scenario(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let req = match ScenarioRequest::parse(&body) {
        Ok(r) => r,
        Err(errors) => return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response(),
    };
    match st.submit(req) {
        Ok((id, info)) => (
            StatusCode::ACCEPTED,
            Json(json!({ "run_id": id, "status": info.status })),
        )
            .into_response(),
        Err(errors) => (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response(),
    }
}

async fn get_status(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match st.lookup(&id) {
        Some(info) => {
            let mut v = serde_json::to_value(&info).expect("status json");
            v["run_id"] = json!(id);
            Json(v).into_response()
        }
        None => unknown_run(&id),
    }
}

/// Result file of a finished run, or the matching error response.
async fn finished_file(st: &AppState, id: &str, name: &str) -> Result<Vec<u8>, Response> {
    let info = st.lookup(id).ok_or_else(|| unknown_run(id))?;
    if info.status != RunStatus::Done {
        let status = serde_json::to_value(info.status).expect("status json");
        let body = json!({
            "error": { "kind": "not_ready", "message": format!("run {id} has not finished") },
            "status": status,
        });
        return Err((StatusCode::CONFLICT, Json(body)).into_response());
    }
    let path = st.run_dir(id).join(name);
    tokio::fs::read(&path)
        .await
        .map_err(|e| error_response(StatusCode::INTERNAL_SERVER_ERROR, "io", format!("{name}: {e}")))
}

async fn get_metrics(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match finished_file(&st, &id, METRICS_FILE).await {
        Ok(b) => json_bytes(b),
        Err(r) => r,
    }
}

async fn get_bze(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match finished_file(&st, &id, BZE_FILE).await {
        Ok(b) => json_bytes(b),
        Err(r) => r,
    }
}

#[derive(Debug, Deserialize)]
struct FramesQuery {
    stride: Option<String>,
}

/// Alive parcel positions of every `stride`-th frame.
pub fn frames_json(a: &RolloutArchive, stride: usize) -> Value {
    let frames: Vec<Value> = a
        .frames
        .iter()
        .step_by(stride)
        .map(|f| {
            let idx: Vec<usize> = (0..f.len()).filter(|&i| f.alive[i]).collect();
            json!({
                "time": f.time,
                "orig_id": idx.iter().map(|&i| f.orig_id[i]).collect::<Vec<_>>(),
                "x": idx.iter().map(|&i| f.position[i].x).collect::<Vec<_>>(),
                "y": idx.iter().map(|&i| f.position[i].y).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({ "stride": stride, "n_frames_total": a.frames.len(), "frames": frames })
}

async fn get_frames(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FramesQuery>,
) -> Response {
    let stride = match q.stride.as_deref() {
        None => 1,
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                let errors = [field_err("stride", "must be a positive integer")];
                return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response();
            }
        },
    };
    let bytes = match finished_file(&st, &id, PREDICTION_FILE).await {
        Ok(b) => b,
        Err(r) => return r,
    };
    let built = tokio::task::spawn_blocking(move || {
        RolloutArchive::read(&mut bytes.as_slice()).map(|a| {
            let mut v = frames_json(&a, stride);
            v["run_id"] = json!(id);
            v
        })
    })
    .await;
    match built {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "format", e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/scenario", post(post_scenario))
        .route("/api/runs/{id}/status", get(get_status))
        .route("/api/runs/{id}/metrics", get(get_metrics))
        .route("/api/runs/{id}/frames", get(get_frames))
        .route("/api/runs/{id}/bze", get(get_bze))
        .with_state(state)
}

pub async fn serve(cfg: ServeConfig) -> CliResult<()> {
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let state = AppState::start(cfg)?;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| CliError::other("io", format!("bind {addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| CliError::other("io", e.to_string()))?;
    println!("{}", json!({ "listening": local.to_string(), "data_dir": state.data_dir }));
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::other("io", e.to_string()))
}
