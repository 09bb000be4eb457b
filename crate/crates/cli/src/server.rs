//! HTTP service for interactive rendering.
//!
//! All state is loaded at startup and shared read-only. Renders run on
//! the blocking pool, at most `workers` at a time.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use simi_sfx_core::audio_io::{encode_wav, WavEncoding};
use simi_sfx_core::config::ProjectConfig;
use simi_sfx_core::dsp::{extract_features, stft_with, FeatureTrack, StftConfig};
use simi_sfx_core::nn::{load_checkpoint, Checkpoint};
use simi_sfx_core::similarity::{BuiltinEmbedder, ClassStatsSet, SimilarityVector};
use simi_sfx_core::synthesis::{synthesize_with, SynthOps};
use tokio::sync::Semaphore;

use crate::data::{load_entry, load_stats, manifest, stats_embedder};
use crate::error::{CliError, CliResult};

/// Bins kept from the 256-point display STFT.
pub const SPECTROGRAM_BINS: usize = 128;
const SPECTROGRAM_FFT: usize = 256;

struct Model {
    ckpt: Checkpoint,
    ops: SynthOps,
    hash: String,
}

struct Reference {
    class: String,
    len: usize,
    sample_rate: u32,
    /// Feature tracks keyed by frame length.
    features: BTreeMap<usize, FeatureTrack>,
}

/// Immutable service state.
pub struct ServiceState {
    models: BTreeMap<String, Model>,
    references: BTreeMap<String, Reference>,
    stats: ClassStatsSet,
    embedder: Option<BuiltinEmbedder>,
    workers: Semaphore,
    worker_count: usize,
}

fn model_id(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::usage(format!("cannot derive a model id from {}", path.display())))
}

impl ServiceState {
    pub fn load(
        checkpoints: &[PathBuf],
        stats: &Path,
        manifest_path: &Path,
        cfg: &ProjectConfig,
        workers: Option<usize>,
    ) -> CliResult<Self> {
        let stats = load_stats(stats)?;
        let embedder = stats_embedder(&stats)?;
        let mut models = BTreeMap::new();
        for p in checkpoints {
            let id = model_id(p)?;
            let ckpt = load_checkpoint(p)?;
            if ckpt.meta.class_labels != stats.labels() {
                return Err(CliError::runtime(
                    "stats",
                    format!("model `{id}` classes {:?} differ from the statistics", ckpt.meta.class_labels),
                ));
            }
            let model = Model {
                ops: SynthOps::new(&ckpt.weights.config),
                hash: ckpt.content_hash(),
                ckpt,
            };
            if models.insert(id.clone(), model).is_some() {
                return Err(CliError::usage(format!("duplicate model id `{id}`")));
            }
        }
        let mut frame_lens: Vec<usize> = models.values().map(|m| m.ckpt.weights.config.frame_len).collect();
        frame_lens.sort_unstable();
        frame_lens.dedup();

        let data = &models.values().next().expect("at least one checkpoint").ckpt.meta.data;
        let cfg = ProjectConfig {
            data: data.clone(),
            ..cfg.clone()
        };
        let m = manifest(manifest_path, &cfg)?;
        let mut references = BTreeMap::new();
        for e in &m.entries {
            let clip = load_entry(&e.resolved, e.id(), &cfg)?;
            let features = frame_lens
                .iter()
                .map(|&f| Ok((f, extract_features(&clip, f, f)?)))
                .collect::<CliResult<_>>()?;
            references.insert(
                e.id().to_string(),
                Reference {
                    class: e.class.clone(),
                    len: clip.len(),
                    sample_rate: clip.sample_rate(),
                    features,
                },
            );
        }
        let worker_count = workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1);
        Ok(Self {
            models,
            references,
            stats,
            embedder,
            workers: Semaphore::new(worker_count),
            worker_count,
        })
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseFormat {
    #[default]
    #[serde(rename = "wav")]
    Wav,
    #[serde(rename = "wav+spectrogram")]
    WavSpectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRequest {
    pub model: String,
    pub reference: String,
    pub similarity: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub format: ResponseFormat,
}

impl SynthRequest {
    /// Stateless handle that re-renders this request.
    pub fn render_id(&self) -> String {
        let key = json!({
            "model": self.model,
            "reference": self.reference,
            "similarity": self.similarity,
            "seed": self.seed,
        });
        URL_SAFE_NO_PAD.encode(key.to_string())
    }

    pub fn from_render_id(id: &str) -> Option<Self> {
        let bytes = URL_SAFE_NO_PAD.decode(id).ok()?;
        let v: Value = serde_json::from_slice(&bytes).ok()?;
        Some(Self {
            model: v.get("model")?.as_str()?.to_string(),
            reference: v.get("reference")?.as_str()?.to_string(),
            similarity: serde_json::from_value(v.get("similarity")?.clone()).ok()?,
            seed: v.get("seed")?.as_u64()?,
            format: ResponseFormat::Wav,
        })
    }
}

/// Service error with an HTTP status and an optional offending field.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    field: Option<&'static str>,
    message: String,
}

impl ApiError {
    fn bad_request(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "invalid_request",
            field: Some(field),
            message: message.into(),
        }
    }

    fn not_found(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            field: Some(field),
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            field: None,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind, "field": self.field, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<simi_sfx_core::Error> for ApiError {
    fn from(e: simi_sfx_core::Error) -> Self {
        Self::internal(e.to_string())
    }
}

/// Checks a request against the loaded models and references.
pub fn validate(state: &ServiceState, req: &SynthRequest) -> Result<(), ApiError> {
    let model = state
        .models
        .get(&req.model)
        .ok_or_else(|| ApiError::not_found("model", format!("unknown model `{}`", req.model)))?;
    if !state.references.contains_key(&req.reference) {
        return Err(ApiError::not_found("reference", format!("unknown reference `{}`", req.reference)));
    }
    let n = model.ckpt.weights.config.n_classes;
    if req.similarity.len() != n {
        return Err(ApiError::bad_request(
            "similarity",
            format!("similarity has {} values, model `{}` has {n} channels", req.similarity.len(), req.model),
        ));
    }
    if let Some((i, v)) = req.similarity.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(ApiError::bad_request(
            "similarity",
            format!("channel {i} out of range: {v} is not in [0, 1]"),
        ));
    }
    Ok(())
}

/// Output of one render.
pub struct Render {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub content_hash: String,
    pub measured_similarity: Option<Vec<f64>>,
}

/// Renders a validated request.
pub fn render(state: &ServiceState, req: &SynthRequest) -> Result<Render, ApiError> {
    validate(state, req)?;
    let model = &state.models[&req.model];
    let reference = &state.references[&req.reference];
    let features = &reference.features[&model.ckpt.weights.config.frame_len];
    let sim = SimilarityVector::new(req.similarity.clone())?;
    let out = synthesize_with(&model.ops, features, &sim, &model.ckpt.weights, req.seed)?;
    let samples = out.export(reference.len);
    let measured_similarity = match &state.embedder {
        Some(e) => Some(state.stats.score(&e.embed_samples(&samples))?.channels().to_vec()),
        None => None,
    };
    Ok(Render {
        samples,
        sample_rate: reference.sample_rate,
        content_hash: model.hash.clone(),
        measured_similarity,
    })
}

/// Log-magnitude display matrix, frames × [`SPECTROGRAM_BINS`].
pub fn spectrogram(samples: &[f64], sample_rate: u32) -> Result<Vec<Vec<f64>>, ApiError> {
    let spec = stft_with(samples, sample_rate, StftConfig::hann(SPECTROGRAM_FFT, SPECTROGRAM_FFT))?;
    Ok((0..spec.frames())
        .map(|i| spec.frame(i)[..SPECTROGRAM_BINS].iter().map(|m| (m + 1e-7).log10()).collect())
        .collect())
}

async fn render_pooled(state: Arc<ServiceState>, req: SynthRequest) -> Result<Render, ApiError> {
    let _permit = state.workers.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let s = state.clone();
    tokio::task::spawn_blocking(move || render(&s, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "models": state.models.len(),
        "references": state.references.len(),
        "workers": state.worker_count,
    }))
}

async fn models(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let list: Vec<Value> = state
        .models
        .iter()
        .map(|(id, m)| {
            json!({
                "id": id,
                "labels": m.ckpt.meta.class_labels,
                "channels": m.ckpt.weights.config.n_classes,
                "content_hash": m.hash,
                "epoch": m.ckpt.meta.epoch,
                "finetune_epochs": m.ckpt.meta.finetune_epochs,
            })
        })
        .collect();
    Json(json!({ "models": list }))
}

async fn references(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let list: Vec<Value> = state
        .references
        .iter()
        .map(|(id, r)| json!({ "id": id, "class": r.class, "samples": r.len, "sample_rate": r.sample_rate }))
        .collect();
    Json(json!({ "references": list }))
}

async fn synthesize(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: SynthRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("body", e.to_string()))?;
    validate(&state, &req)?;
    let start = Instant::now();
    let r = render_pooled(state.clone(), req.clone()).await?;
    let wav = encode_wav(&r.samples, r.sample_rate, WavEncoding::Float32)?;
    let spectrogram = match req.format {
        ResponseFormat::Wav => None,
        ResponseFormat::WavSpectrogram => Some(spectrogram(&r.samples, r.sample_rate)?),
    };
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Json(json!({
        "render_id": req.render_id(),
        "model": req.model,
        "reference": req.reference,
        "seed": req.seed,
        "content_hash": r.content_hash,
        "sample_rate": r.sample_rate,
        "samples": r.samples.len(),
        "latency_ms": latency_ms,
        "audio": STANDARD.encode(wav),
        "spectrogram": spectrogram,
        "measured_similarity": r.measured_similarity,
    })))
}

async fn audio(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let req = SynthRequest::from_render_id(&id)
        .ok_or_else(|| ApiError::not_found("render_id", format!("unknown render id `{id}`")))?;
    validate(&state, &req)?;
    let r = render_pooled(state, req).await?;
    let wav = encode_wav(&r.samples, r.sample_rate, WavEncoding::Float32)?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], wav).into_response())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/references", get(references))
        .route("/v1/synthesize", post(synthesize))
        .route("/v1/audio/{id}", get(audio))
        .with_state(state)
}

/// Runs the service until interrupted.
pub fn serve_blocking(state: ServiceState, addr: SocketAddr) -> CliResult<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime("io", e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::runtime("io", format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on {addr}");
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::runtime("io", e.to_string()))
    })
}
