use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use stemforge_core::wav::encode_wav;

use crate::error::{Result, ServiceError};
use crate::session::SessionView;
use crate::studio::{GenerateRequest, Studio};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Upload {
    pub track: usize,
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub prompt_tokens: Vec<u32>,
    #[serde(default)]
    pub uploads: Vec<Upload>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generate {
    #[serde(default)]
    pub seed: u64,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRef {
    pub index: usize,
    pub samples_ref: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generated {
    /// `None` when generation runs in the background.
    pub candidate_id: Option<String>,
    pub tracks: Vec<TrackRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Select {
    pub candidate_id: String,
    pub tracks: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Unlock {
    pub track: usize,
}

type Shared = State<Arc<Studio>>;

pub fn router(studio: Arc<Studio>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/unlock", post(unlock))
        .route("/sessions/{id}/upload", post(upload))
        .route("/sessions/{id}/tracks/{file}", get(track_wav))
        .route("/sessions/{id}/candidates/{cid}/tracks/{file}", get(candidate_wav))
        .route("/sessions/{id}/mix.wav", get(mix_wav))
        .with_state(studio)
}

/// Runs blocking studio work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create(State(st): Shared, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<Created>)> {
    let uploads = req.uploads.into_iter().map(|u| (u.track, u.samples)).collect();
    let view = blocking(move || st.create_session(req.prompt_tokens, uploads)).await?;
    Ok((StatusCode::CREATED, Json(Created { session_id: view.id })))
}

async fn show(State(st): Shared, Path(id): Path<String>) -> Result<Json<SessionView>> {
    Ok(Json(st.session_view(&id)?))
}

async fn generate(State(st): Shared, Path(id): Path<String>, Json(req): Json<Generate>) -> Result<Response> {
    let request = GenerateRequest {
        seed: req.seed,
        lambda: req.lambda.unwrap_or(st.config().sampler.guidance_scale),
    };
    let job = st.begin_generation(&id, request)?;
    if st.config().async_generation {
        let st2 = st.clone();
        tokio::task::spawn_blocking(move || {
            let result = st2.run_generation(&job);
            if let Err(e) = st2.finish_generation(&job, result) {
                log::warn!("background generation for {} failed: {e}", job.session_id());
            }
        });
        let body = Generated {
            candidate_id: None,
            tracks: Vec::new(),
        };
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    let st2 = st.clone();
    let candidate = blocking(move || {
        let result = st2.run_generation(&job);
        st2.finish_generation(&job, result)
    })
    .await?;
    let tracks = (0..candidate.tracks.len())
        .map(|index| TrackRef {
            index,
            samples_ref: format!("/sessions/{id}/candidates/{}/tracks/{index}.wav", candidate.id),
        })
        .collect();
    let body = Generated {
        candidate_id: Some(candidate.id),
        tracks,
    };
    Ok(Json(body).into_response())
}

async fn select(State(st): Shared, Path(id): Path<String>, Json(req): Json<Select>) -> Result<Json<SessionView>> {
    Ok(Json(st.select(&id, &req.candidate_id, &req.tracks)?))
}

async fn unlock(State(st): Shared, Path(id): Path<String>, Json(req): Json<Unlock>) -> Result<Json<SessionView>> {
    Ok(Json(st.unlock(&id, req.track)?))
}

async fn upload(State(st): Shared, Path(id): Path<String>, Json(req): Json<Upload>) -> Result<Json<SessionView>> {
    Ok(Json(st.upload(&id, req.track, req.samples)?))
}

fn wav_index(file: &str) -> Result<usize> {
    file.strip_suffix(".wav")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ServiceError::NotFound(format!("no such file `{file}`")))
}

fn wav_response(samples: impl IntoIterator<Item = f64>, sample_rate: u32) -> Response {
    let x: Vec<f64> = samples.into_iter().collect();
    ([(header::CONTENT_TYPE, "audio/wav")], encode_wav(&x, sample_rate)).into_response()
}

async fn track_wav(State(st): Shared, Path((id, file)): Path<(String, String)>) -> Result<Response> {
    let samples = st.locked_track(&id, wav_index(&file)?)?;
    Ok(wav_response(samples.iter().map(|&v| v as f64), st.config().sample_rate))
}

async fn candidate_wav(
    State(st): Shared,
    Path((id, cid, file)): Path<(String, String, String)>,
) -> Result<Response> {
    let samples = st.candidate_track(&id, &cid, wav_index(&file)?)?;
    Ok(wav_response(samples.iter().map(|&v| v as f64), st.config().sample_rate))
}

async fn mix_wav(State(st): Shared, Path(id): Path<String>) -> Result<Response> {
    let mix = st.render_mix(&id)?;
    Ok(wav_response(mix, st.config().sample_rate))
}

/// Binds and serves until the process is stopped.
pub async fn serve(studio: Arc<Studio>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(studio)).await
}
