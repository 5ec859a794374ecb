//! In-process HTTP client and a scripted user that walks the co-composition
//! loop: joint rounds until something is kept, then conditional rounds until
//! every track is locked.

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

use crate::error::{ErrorBody, Result, ServiceError};
use crate::http::{Created, Generated, Select};
use crate::session::SessionView;

/// Sends requests straight into a router, no sockets involved.
#[derive(Clone)]
pub struct LocalClient {
    router: Router,
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: StatusCode,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_slice(&self.body).map_err(|e| {
            ServiceError::Internal(format!("{e}: {}", String::from_utf8_lossy(&self.body)))
        })
    }

    pub fn error(&self) -> Option<ErrorBody> {
        serde_json::from_slice(&self.body).ok()
    }

    fn ok<T: DeserializeOwned>(self) -> Result<T> {
        if self.status.is_success() {
            return self.json();
        }
        let e = self.error().map_or_else(|| format!("status {}", self.status), |e| format!("{}: {}", e.code, e.message));
        Err(ServiceError::Internal(format!("request failed: {e}")))
    }
}

impl LocalClient {
    pub fn new(router: Router) -> Self {
        Self { router }
    }

    pub async fn send(&self, method: Method, uri: &str, body: Option<String>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(body.map_or_else(Body::empty, Body::from)).expect("request builds");
        let resp = self.router.clone().oneshot(req).await.expect("router is infallible");
        let status = resp.status();
        let body = to_bytes(resp.into_body(), usize::MAX).await.map(|b| b.to_vec()).unwrap_or_default();
        Reply { status, body }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.send(Method::GET, uri, None).await
    }

    pub async fn post<T: Serialize>(&self, uri: &str, body: &T) -> Reply {
        let json = serde_json::to_string(body).expect("request body serializes");
        self.send(Method::POST, uri, Some(json)).await
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptReport {
    pub session_id: String,
    pub joint_rounds: usize,
    pub conditional_rounds: usize,
    /// Every locked track kept identical bytes through later rounds.
    pub locked_unchanged: bool,
    /// A generate request after all tracks were locked was rejected.
    pub rejected_after_completion: bool,
    pub mix_wav: Vec<u8>,
}

/// A user who keeps `keep_per_round` new tracks from every candidate, lowest
/// index first, until the session is complete.
pub async fn accept_loop(
    client: &LocalClient,
    prompt_tokens: &[u32],
    keep_per_round: usize,
    seed: u64,
    lambda: f64,
) -> Result<ScriptReport> {
    if keep_per_round == 0 {
        return Err(ServiceError::InvalidInput("the scripted user must keep at least one track".into()));
    }
    let created: Created = client
        .post("/sessions", &serde_json::json!({ "prompt_tokens": prompt_tokens }))
        .await
        .ok()?;
    let id = created.session_id;
    let base = format!("/sessions/{id}");
    let mut report = ScriptReport {
        session_id: id.clone(),
        joint_rounds: 0,
        conditional_rounds: 0,
        locked_unchanged: true,
        rejected_after_completion: false,
        mix_wav: Vec::new(),
    };
    let mut kept: Vec<(usize, Vec<u8>)> = Vec::new();
    let mut round = 0u64;
    loop {
        let state: SessionView = client.get(&base).await.ok()?;
        if state.complete {
            break;
        }
        if state.locked.is_empty() {
            report.joint_rounds += 1;
        } else {
            report.conditional_rounds += 1;
        }
        let generated: Generated = client
            .post(&format!("{base}/generate"), &serde_json::json!({ "seed": seed + round, "lambda": lambda }))
            .await
            .ok()?;
        round += 1;
        let cid = generated
            .candidate_id
            .ok_or_else(|| ServiceError::Internal("generation did not complete synchronously".into()))?;
        for (track, bytes) in &kept {
            let now = client.get(&format!("{base}/tracks/{track}.wav")).await;
            let in_candidate = client.get(&format!("{base}/candidates/{cid}/tracks/{track}.wav")).await;
            report.locked_unchanged &= now.body == *bytes && in_candidate.body == *bytes;
        }
        let locked: Vec<usize> = state.locked.iter().map(|l| l.track).collect();
        let pick: Vec<usize> = generated
            .tracks
            .iter()
            .map(|t| t.index)
            .filter(|i| !locked.contains(i))
            .take(keep_per_round)
            .collect();
        let _: SessionView = client
            .post(
                &format!("{base}/select"),
                &Select {
                    candidate_id: cid,
                    tracks: pick.clone(),
                },
            )
            .await
            .ok()?;
        for t in pick {
            kept.push((t, client.get(&format!("{base}/tracks/{t}.wav")).await.body));
        }
    }
    let again = client
        .post(&format!("{base}/generate"), &serde_json::json!({ "seed": seed, "lambda": lambda }))
        .await;
    report.rejected_after_completion = again.status == StatusCode::BAD_REQUEST;
    let mix = client.get(&format!("{base}/mix.wav")).await;
    if mix.status != StatusCode::OK {
        return Err(ServiceError::Internal(format!("mix request failed with {}", mix.status)));
    }
    report.mix_wav = mix.body;
    Ok(report)
}
