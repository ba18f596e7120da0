//! HTTP job service: upload media, process it in the background, stream the
//! orchestrator's NDJSON events, fetch results and per-utterance artifacts,
//! and clear jobs.

pub mod config;
pub mod jobs;

use std::convert::Infallible;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::multipart::{Multipart, MultipartError, MultipartRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mer_core::calibrate::{Thresholds, ThresholdsFile};
use mer_core::extract::Vocab;
use mer_core::media::{decode_video, load_bundle, MediaBundle};
use mer_core::orchestrator::{Event, Pipeline, PipelineError, RunControl};
use mer_core::{ModelArchive, PipelineConfig, EMOTIONS};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

pub use config::{Overrides, ServiceConfig};
use jobs::{Job, JobSink, JobState, JobTable, INPUT_DIR};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("model archive {path}: {source}")]
    Model { path: PathBuf, source: mer_core::ArchiveError },
    #[error("{0}")]
    Load(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

struct AppState {
    config: ServiceConfig,
    model: Arc<ModelArchive>,
    vocab: Option<Vocab>,
    thresholds: Thresholds,
    jobs: JobTable,
    jobs_dir: PathBuf,
    permits: Arc<Semaphore>,
}

/// A loaded service, ready to be mounted on a listener.
#[derive(Clone)]
pub struct Service {
    state: Arc<AppState>,
}

impl Service {
    /// Loads the model and thresholds, prepares the job directory, and
    /// recovers jobs left by a previous process.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let model = ModelArchive::load(&config.model)
            .map_err(|source| ServiceError::Model { path: config.model.clone(), source })?;
        let thresholds = ThresholdsFile::load(&config.thresholds).map_err(|e| ServiceError::Load(e.to_string()))?;
        let vocab = match &config.vocab {
            Some(p) => Some(Vocab::load(p).map_err(|e| ServiceError::Load(e.to_string()))?),
            None => None,
        };
        if vocab.is_none() && model.vocab.is_none() {
            return Err(ServiceError::Load("no vocabulary: the model archive has none and no vocab path is set".into()));
        }
        let jobs_dir = config.data_dir.join("jobs");
        std::fs::create_dir_all(&jobs_dir)?;
        let jobs = JobTable::default();
        let recovered = jobs.recover(&jobs_dir)?;
        if recovered > 0 {
            tracing::info!("recovered {recovered} job(s) from {}", jobs_dir.display());
        }
        let permits = Arc::new(Semaphore::new(config.max_parallel_jobs));
        Ok(Service {
            state: Arc::new(AppState { config, model: Arc::new(model), vocab, thresholds, jobs, jobs_dir, permits }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.state.config
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/health", get(health))
            .route("/api/jobs", post(create_job))
            .route("/api/jobs/{id}", get(get_job).delete(delete_job))
            .route("/api/jobs/{id}/events", get(job_events))
            .route("/api/jobs/{id}/utterances/{k}/faces/{file}", get(face_image))
            .route("/api/jobs/{id}/utterances/{k}/audio.wav", get(utterance_audio))
            .layer(DefaultBodyLimit::max(self.state.config.max_upload_bytes))
            .with_state(self.state.clone())
    }

    pub async fn serve(self, listener: TcpListener) -> io::Result<()> {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown_signal()).await
    }
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

/// Binds `config.bind` and serves until interrupted.
pub async fn run(config: ServiceConfig) -> Result<(), ServiceError> {
    let service = Service::open(config)?;
    let listener = TcpListener::bind(&service.config().bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    service.serve(listener).await?;
    Ok(())
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn multipart_error(e: MultipartError) -> Response {
    error(e.status(), e.body_text())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

enum Upload {
    Bundle(Bytes),
    Media { file_name: String, data: Bytes },
}

/// Shallow-merges the top-level keys of `overrides` onto `base`.
fn merge_config(base: &PipelineConfig, overrides: &str) -> Result<PipelineConfig, String> {
    let patch: Value = serde_json::from_str(overrides).map_err(|e| format!("config field: {e}"))?;
    let Value::Object(patch) = patch else { return Err("config field must be a JSON object".into()) };
    let mut merged = serde_json::to_value(base).expect("config serializes");
    let obj = merged.as_object_mut().expect("config is an object");
    for (k, v) in patch {
        obj.insert(k, v);
    }
    PipelineConfig::from_json(&merged.to_string(), "config field").map_err(|e| e.to_string())
}

async fn create_job(State(state): State<Arc<AppState>>, multipart: Result<Multipart, MultipartRejection>) -> Response {
    let mut multipart = match multipart {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let mut upload = None;
    let mut overrides = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return multipart_error(e),
        };
        let name = field.name().unwrap_or_default().to_string();
        let file_name = field.file_name().unwrap_or("upload.bin").to_string();
        let data = match field.bytes().await {
            Ok(d) => d,
            Err(e) => return multipart_error(e),
        };
        match name.as_str() {
            "bundle" => upload = Some(Upload::Bundle(data)),
            "media" => upload = Some(Upload::Media { file_name, data }),
            "config" => overrides = Some(String::from_utf8_lossy(&data).into_owned()),
            _ => {}
        }
    }
    let upload = match upload {
        Some(Upload::Bundle(d)) | Some(Upload::Media { data: d, .. }) if d.is_empty() => {
            return error(StatusCode::BAD_REQUEST, "uploaded file is empty")
        }
        Some(u) => u,
        None => return error(StatusCode::BAD_REQUEST, "expected a multipart field named \"bundle\" or \"media\""),
    };
    let pipeline_cfg = match &overrides {
        Some(text) => match merge_config(&state.config.pipeline, text) {
            Ok(c) => c,
            Err(e) => return error(StatusCode::BAD_REQUEST, e),
        },
        None => state.config.pipeline.clone(),
    };

    let job = match Job::create(&state.jobs_dir) {
        Ok(j) => j,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    let input = job.dir.join(INPUT_DIR);
    let cfg = pipeline_cfg.clone();
    let bundle = tokio::task::spawn_blocking(move || materialize(&input, upload, &cfg)).await;
    let bundle = match bundle {
        Ok(Ok(b)) => b,
        Ok(Err(msg)) => {
            let _ = std::fs::remove_dir_all(&job.dir);
            return error(StatusCode::UNPROCESSABLE_ENTITY, msg);
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&job.dir);
            return error(StatusCode::INTERNAL_SERVER_ERROR, e);
        }
    };
    state.jobs.insert(job.clone());
    let id = job.id.clone();
    tokio::spawn(process(state.clone(), job, bundle, pipeline_cfg));
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()
}

/// Writes the upload under `input` and loads it as a bundle.
fn materialize(input: &Path, upload: Upload, cfg: &PipelineConfig) -> Result<MediaBundle, String> {
    match upload {
        Upload::Bundle(data) => {
            let root = extract_zip(&data, &input.join("bundle"))?;
            load_bundle(&root, cfg.sample_rate_hz).map_err(|e| e.to_string())
        }
        Upload::Media { file_name, data } => {
            let Some(cmd) = &cfg.decoder_command else {
                return Err("media upload needs a decoder_command; upload a bundle zip instead".into());
            };
            let safe: String =
                file_name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
            let path = input.join(format!("media-{safe}"));
            std::fs::write(&path, &data).map_err(|e| e.to_string())?;
            decode_video(&path, cmd, &input.join("bundle"), cfg.sample_rate_hz).map_err(|e| e.to_string())
        }
    }
}

/// Unpacks a zip into `dest`. The bundle root is `dest` itself or its only
/// subdirectory when the archive wraps the files in one folder.
fn extract_zip(data: &[u8], dest: &Path) -> Result<PathBuf, String> {
    let mut zip = zip::ZipArchive::new(Cursor::new(data)).map_err(|e| format!("bundle is not a zip archive: {e}"))?;
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| e.to_string())?;
        let Some(rel) = entry.enclosed_name() else { return Err(format!("unsafe path in archive: {}", entry.name())) };
        let out = dest.join(rel);
        if entry.is_dir() {
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            continue;
        }
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        let mut f = std::fs::File::create(&out).map_err(|e| e.to_string())?;
        io::copy(&mut entry, &mut f).map_err(|e| e.to_string())?;
    }
    if dest.join(mer_core::media::AUDIO_FILE).exists() {
        return Ok(dest.to_path_buf());
    }
    let subdirs: Vec<PathBuf> = std::fs::read_dir(dest)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    Ok(match subdirs.as_slice() {
        [only] => only.clone(),
        _ => dest.to_path_buf(),
    })
}

async fn process(state: Arc<AppState>, job: Arc<Job>, bundle: MediaBundle, cfg: PipelineConfig) {
    let _permit = match state.permits.clone().acquire_owned().await {
        Ok(p) => p,
        Err(_) => return,
    };
    if job.cancel.load(Ordering::SeqCst) {
        return;
    }
    if let Err(e) = job.set_state(JobState::Processing) {
        tracing::warn!("job {}: {e}", job.id);
    }
    let pace = Duration::from_millis(state.config.utterance_delay_ms);
    let worker_state = state.clone();
    let worker_job = job.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let s = worker_state;
        let pipeline = Pipeline::from_config(&cfg, &s.model, s.vocab.clone(), s.thresholds)?;
        let mut sink = JobSink { job: worker_job.clone(), held_final: None };
        let control = RunControl { cancel: Some(&worker_job.cancel), pace };
        let result = pipeline.run(&bundle, &mut sink, control)?;
        Ok::<_, PipelineError>((result, sink.held_final))
    })
    .await;

    if job.lock().state == JobState::Cleared {
        return;
    }
    let failure = match outcome {
        Ok(Ok((result, Some(final_event)))) => {
            let value = serde_json::to_value(&result).expect("result serializes");
            match job.finish(value, &final_event) {
                Ok(()) => return,
                Err(e) => e.to_string(),
            }
        }
        Ok(Ok((_, None))) => "run ended without a final event".to_string(),
        Ok(Err(e)) => e.to_string(),
        Err(e) => format!("worker crashed: {e}"),
    };
    tracing::warn!("job {} failed: {failure}", job.id);
    let _ = job.set_state(JobState::Failed);
    let _ = job.append(&Event::Failed { error: failure });
}

#[allow(clippy::result_large_err)]
fn lookup(state: &AppState, id: &str) -> Result<Arc<Job>, Response> {
    let job = state.jobs.get(id).ok_or_else(|| error(StatusCode::NOT_FOUND, format!("no job {id}")))?;
    if job.lock().state == JobState::Cleared {
        return Err(error(StatusCode::GONE, format!("job {id} was cleared")));
    }
    Ok(job)
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let job = match lookup(&state, &id) {
        Ok(j) => j,
        Err(r) => return r,
    };
    let inner = job.lock();
    let mut body = json!({
        "id": job.id,
        "state": inner.state,
        "created_at": inner.created_at,
        "emotions": EMOTIONS,
    });
    if let (JobState::Done, Some(result)) = (inner.state, &inner.result) {
        body["result"] = result.clone();
    }
    Json(body).into_response()
}

async fn delete_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(job) = state.jobs.get(&id) else { return error(StatusCode::NOT_FOUND, format!("no job {id}")) };
    match job.clear() {
        Ok(true) => StatusCode::NO_CONTENT.into_response(),
        Ok(false) => error(StatusCode::GONE, format!("job {id} was cleared")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// Replays the log from the start, then follows appends until the log closes.
async fn job_events(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let job = match lookup(&state, &id) {
        Ok(j) => j,
        Err(r) => return r,
    };
    let rx = job.subscribe();
    let stream = futures::stream::unfold((job, rx, 0usize, false), |(job, mut rx, offset, done)| async move {
        if done {
            return None;
        }
        loop {
            rx.borrow_and_update();
            let (chunk, closed) = {
                let inner = job.lock();
                (inner.log[offset.min(inner.log.len())..].to_vec(), inner.closed)
            };
            if !chunk.is_empty() {
                let next = offset + chunk.len();
                return Some((Ok::<_, Infallible>(Bytes::from(chunk)), (job, rx, next, closed)));
            }
            if closed || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream))
        .expect("static headers")
}

async fn artifact(state: &AppState, id: &str, k: usize, rel: &str, content_type: &'static str) -> Response {
    let job = match lookup(state, id) {
        Ok(j) => j,
        Err(r) => return r,
    };
    let path = job.utterance_dir(k).join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type)], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, format!("no artifact {rel} for utterance {k}")),
    }
}

async fn face_image(
    State(state): State<Arc<AppState>>,
    UrlPath((id, k, file)): UrlPath<(String, usize, String)>,
) -> Response {
    let Some(j) = file.strip_suffix(".png").and_then(|s| s.parse::<usize>().ok()) else {
        return error(StatusCode::NOT_FOUND, format!("no face {file}"));
    };
    artifact(&state, &id, k, &format!("faces/{j}.png"), "image/png").await
}

async fn utterance_audio(State(state): State<Arc<AppState>>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Response {
    artifact(&state, &id, k, "audio.wav", "audio/wav").await
}
