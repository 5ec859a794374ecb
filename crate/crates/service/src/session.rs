use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stemforge_core::tensorfile::{self, NamedTensor};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Generating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Generated { candidate_id: String },
    Uploaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockedTrack {
    pub samples: Vec<f32>,
    pub provenance: Provenance,
}

/// One generation round: all `K` tracks, locked ones copied through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub seed: u64,
    pub lambda: f64,
    /// Task string, e.g. `drums,melody | given bass,instrument`.
    pub task: String,
    pub tracks: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    /// Content tokens; the task prefix is chosen per generation.
    pub prompt: Vec<u32>,
    pub locked: BTreeMap<usize, LockedTrack>,
    pub candidates: Vec<Candidate>,
    pub status: Status,
}

impl Session {
    pub fn new(id: String, prompt: Vec<u32>) -> Self {
        Self {
            id,
            prompt,
            locked: BTreeMap::new(),
            candidates: Vec::new(),
            status: Status::Idle,
        }
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn is_complete(&self, tracks: usize) -> bool {
        self.locked.len() == tracks
    }

    pub fn view(&self, tracks: usize) -> SessionView {
        SessionView {
            id: self.id.clone(),
            prompt_tokens: self.prompt.clone(),
            locked: self
                .locked
                .iter()
                .map(|(&track, l)| LockedView {
                    track,
                    provenance: l.provenance.clone(),
                })
                .collect(),
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateView {
                    id: c.id.clone(),
                    seed: c.seed,
                    lambda: c.lambda,
                    task: c.task.clone(),
                })
                .collect(),
            status: self.status,
            complete: self.is_complete(tracks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockedView {
    pub track: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub seed: u64,
    pub lambda: f64,
    pub task: String,
}

/// Session state as returned by `GET /sessions/{id}`; waveforms are fetched
/// through the WAV endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub prompt_tokens: Vec<u32>,
    pub locked: Vec<LockedView>,
    pub candidates: Vec<CandidateView>,
    pub status: Status,
    pub complete: bool,
}

/// On-disk form: a length-prefixed JSON header followed by a tensor container
/// holding every waveform (`locked.{k}`, `candidate.{i}.{k}`).
pub fn encode_session(s: &Session) -> Vec<u8> {
    // A session caught mid-generation is stored idle; its request is gone.
    let mut header = s.view(usize::MAX);
    header.status = Status::Idle;
    let json = serde_json::to_vec(&header).expect("session header serializes");
    let mut tensors = Vec::new();
    for (k, l) in &s.locked {
        tensors.push(NamedTensor::new(format!("locked.{k}"), vec![l.samples.len()], l.samples.clone()));
    }
    for (i, c) in s.candidates.iter().enumerate() {
        for (k, t) in c.tracks.iter().enumerate() {
            tensors.push(NamedTensor::new(format!("candidate.{i}.{k}"), vec![t.len()], t.clone()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&tensorfile::encode(&tensors));
    out
}

pub fn decode_session(bytes: &[u8]) -> Result<Session> {
    let bad = |m: String| ServiceError::Internal(format!("session file: {m}"));
    if bytes.len() < 4 {
        return Err(bad("truncated".into()));
    }
    let n = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let json = bytes.get(4..4 + n).ok_or_else(|| bad("truncated header".into()))?;
    let view: SessionView = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    let tensors = tensorfile::decode(&bytes[4 + n..]).map_err(|e| bad(e.to_string()))?;
    let mut by_name: BTreeMap<String, Vec<f32>> = tensors.into_iter().map(|t| (t.name, t.data)).collect();
    let mut take = |name: String| by_name.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")));
    let mut locked = BTreeMap::new();
    for l in view.locked {
        let samples = take(format!("locked.{}", l.track))?;
        locked.insert(
            l.track,
            LockedTrack {
                samples,
                provenance: l.provenance,
            },
        );
    }
    let mut candidates = Vec::new();
    for (i, c) in view.candidates.into_iter().enumerate() {
        let mut tracks = Vec::new();
        while let Ok(t) = take(format!("candidate.{i}.{}", tracks.len())) {
            tracks.push(t);
        }
        candidates.push(Candidate {
            id: c.id,
            seed: c.seed,
            lambda: c.lambda,
            task: c.task,
            tracks,
        });
    }
    Ok(Session {
        id: view.id,
        prompt: view.prompt_tokens,
        locked,
        candidates,
        status: Status::Idle,
    })
}

pub const SESSION_EXT: &str = "session";

/// Writes through a temporary file so a crash never leaves a torn session.
pub fn save_session(dir: &Path, s: &Session) -> Result<()> {
    let path = dir.join(format!("{}.{SESSION_EXT}", s.id));
    let tmp = dir.join(format!(".{}.tmp", s.id));
    std::fs::write(&tmp, encode_session(s))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_sessions(dir: &Path) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == SESSION_EXT) {
            out.push(decode_session(&std::fs::read(&path)?)?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
