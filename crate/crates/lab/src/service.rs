//! JSON-over-HTTP sampling service.
//!
//! Sampling runs on blocking worker threads. At most `workers` jobs run at
//! once and at most `queue_depth` more may wait; anything beyond gets 429.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use freeu_core::diffusion::{sample, RecordLevel, SampleRequest};
use freeu_core::freeu::{FieldError, FreeUConfig};
use freeu_core::schedule::NoiseSchedule;
use freeu_core::spectral::{trajectory_band_stats, BandStatRow, SpectrumProfile};
use freeu_core::tensor::Tensor;
use freeu_core::unet::{StageSite, UNetModel, CONCAT_ORDER};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::checkpoint::Checkpoint;
use crate::config::ServeSpec;
use crate::error::LabError;
use crate::job::{encode_pgm, execute, sampling_schedule, SampleJob, SampleSet};

pub struct Service {
    model: UNetModel,
    schedule: NoiseSchedule,
    default_freeu: FreeUConfig,
    train_step: u64,
    workers: Semaphore,
    admission: Semaphore,
}

pub type AppState = Arc<Service>;

pub fn default_workers() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    cores.saturating_sub(1).max(1)
}

impl Service {
    pub fn new(ckpt: Checkpoint, spec: &ServeSpec) -> Result<AppState, LabError> {
        let schedule = ckpt.config.schedule.build()?;
        let workers = if spec.workers == 0 {
            default_workers()
        } else {
            spec.workers
        };
        Ok(Arc::new(Service {
            model: ckpt.model,
            schedule,
            default_freeu: ckpt.config.freeu,
            train_step: ckpt.step,
            workers: Semaphore::new(workers),
            admission: Semaphore::new(workers + spec.queue_depth),
        }))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/config", get(config))
        .route("/api/sample", post(sample_handler))
        .route("/api/compare", post(compare_handler))
        .route("/api/trajectory", post(trajectory_handler))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub enum ApiError {
    Invalid(Vec<FieldError>),
    Busy,
    Diverged(usize),
    Internal(String),
}

impl From<LabError> for ApiError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(fields) => ApiError::Invalid(fields),
            LabError::Core(freeu_core::Error::SamplingDiverged { step }) => ApiError::Diverged(step),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<freeu_core::Error> for ApiError {
    fn from(e: freeu_core::Error) -> Self {
        LabError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Invalid(fields) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "invalid request", "fields": fields }),
            ),
            ApiError::Busy => (
                StatusCode::TOO_MANY_REQUESTS,
                json!({ "error": "sampling queue is full" }),
            ),
            ApiError::Diverged(step) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({ "error": format!("sampling diverged at step {step}"), "step": step }),
            ),
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": msg })),
        };
        (status, Json(body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::Invalid(vec![FieldError {
            field: "body".into(),
            message: e.to_string(),
        }])
    })
}

/// Runs `f` on a blocking worker once admitted.
async fn run_job<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
{
    let _ticket = state.admission.try_acquire().map_err(|_| ApiError::Busy)?;
    let _worker = state
        .workers
        .acquire()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let st = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let cfg = state.model.config();
    Json(json!({
        "status": "ok",
        "model": {
            "parameters": state.model.parameter_count(),
            "image_size": cfg.image_size,
            "in_channels": cfg.in_channels,
            "stages": cfg.stages(),
            "schedule_steps": state.schedule.len(),
            "train_step": state.train_step,
            "concat_order": CONCAT_ORDER,
        }
    }))
}

#[derive(Serialize)]
struct ConfigResponse {
    freeu: FreeUConfig,
    stages: Vec<StageSite>,
    max_steps: usize,
}

async fn config(State(state): State<AppState>) -> Json<ConfigResponse> {
    Json(ConfigResponse {
        freeu: state.default_freeu.clone(),
        stages: state.model.stage_sites(),
        max_steps: state.schedule.len(),
    })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBody {
    pub seed: u64,
    pub steps: usize,
    pub count: usize,
    pub freeu: FreeUConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBody {
    pub seed: u64,
    pub steps: usize,
    pub freeu: FreeUConfig,
    #[serde(default = "one")]
    pub count: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryBody {
    pub seed: u64,
    pub steps: usize,
    pub freeu: FreeUConfig,
    pub r_cut: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    /// Base64-encoded binary PGM images.
    pub images: Vec<String>,
    pub spectra: Vec<SpectrumProfile>,
}

fn image_set(set: &SampleSet) -> Result<ImageSet, ApiError> {
    let images = (0..set.images.shape()[0])
        .map(|i| Ok(STANDARD.encode(encode_pgm(&set.images.batch_item(i)?)?)))
        .collect::<Result<Vec<_>, LabError>>()?;
    Ok(ImageSet {
        images,
        spectra: set.spectra.clone(),
    })
}

fn job(seed: u64, steps: usize, count: usize, freeu: FreeUConfig, compare: bool) -> SampleJob {
    SampleJob {
        seed,
        count,
        steps,
        freeu,
        record_trajectory: false,
        compare,
        r_cut: 4.0,
    }
}

async fn sample_handler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SampleBody = parse(&body)?;
    let job = job(req.seed, req.steps, req.count, req.freeu, false);
    check(&state, &job)?;
    let out = run_job(&state, move |s| {
        let start = Instant::now();
        let out = execute(&s.model, &s.schedule, &job)?;
        let set = image_set(&out.freeu)?;
        Ok(json!({
            "images": set.images,
            "spectra": set.spectra,
            "timing_ms": start.elapsed().as_millis() as u64,
        }))
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn compare_handler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CompareBody = parse(&body)?;
    let job = job(req.seed, req.steps, req.count, req.freeu, true);
    check(&state, &job)?;
    let out = run_job(&state, move |s| {
        let start = Instant::now();
        let out = execute(&s.model, &s.schedule, &job)?;
        let base = image_set(out.baseline.as_ref().expect("compare runs a baseline"))?;
        let freeu = image_set(&out.freeu)?;
        let identical = base.images == freeu.images;
        Ok(json!({
            "baseline": base,
            "freeu": freeu,
            "identical": identical,
            "timing_ms": start.elapsed().as_millis() as u64,
        }))
    })
    .await?;
    Ok(Json(out).into_response())
}

/// 2×2 average pooling of a single `[1, 1, H, W]` image.
fn downsample(x: &Tensor) -> Result<Tensor, freeu_core::Error> {
    let [_, _, h, w] = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let out = Tensor::from_fn(vec![oh, ow], |i| {
        let (y, xx) = (2 * (i / ow), 2 * (i % ow));
        0.25 * (d[y * w + xx] + d[y * w + xx + 1] + d[(y + 1) * w + xx] + d[(y + 1) * w + xx + 1])
    });
    Ok(out)
}

#[derive(Serialize)]
struct TrajectoryResponse {
    band_stats: Vec<BandStatRow>,
    /// Base64 PGM of `x_t` at half resolution, one per step.
    frames: Vec<String>,
    steps: Vec<usize>,
    timing_ms: u64,
}

async fn trajectory_handler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: TrajectoryBody = parse(&body)?;
    let mut job = job(req.seed, req.steps, 1, req.freeu, false);
    job.r_cut = req.r_cut;
    job.record_trajectory = true;
    check(&state, &job)?;
    let out = run_job(&state, move |s| {
        let start = Instant::now();
        let schedule = sampling_schedule(&s.schedule, job.steps)?;
        let mut r = SampleRequest::new(job.seed, 1).recording(RecordLevel::States);
        if job.freeu.enabled {
            r = r.with_modulator(&job.freeu);
        }
        let (_, rec) = sample(&s.model, &schedule, r)?;
        let rec = rec.expect("states recorded");
        let band_stats = trajectory_band_stats(&rec, job.r_cut)?;
        let frames = rec
            .steps
            .iter()
            .map(|st| Ok(STANDARD.encode(encode_pgm(&downsample(&st.x_t)?)?)))
            .collect::<Result<Vec<_>, LabError>>()?;
        Ok(TrajectoryResponse {
            band_stats,
            frames,
            steps: rec.steps.iter().map(|st| st.t).collect(),
            timing_ms: start.elapsed().as_millis() as u64,
        })
    })
    .await?;
    Ok(Json(out).into_response())
}

fn check(state: &Service, job: &SampleJob) -> Result<(), ApiError> {
    let errs = job.validate(state.model.config().stages(), state.schedule.len());
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ApiError::Invalid(errs))
    }
}
