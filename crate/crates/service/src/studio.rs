use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use rand::Rng;
use stemforge_core::data::{mix, Codec};
use stemforge_core::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig, TaskSpec, TrackSet};
use stemforge_core::prompt::{format_task, PromptTokens};
use stemforge_core::rng::{seeded, StemRng};

use crate::error::{Result, ServiceError};
use crate::session::{load_sessions, save_session, Candidate, LockedTrack, Provenance, Session, SessionView, Status};

pub type SharedModel = Arc<dyn NoisePredictor + Send + Sync>;

#[derive(Debug, Clone)]
pub struct StudioConfig {
    pub sample_rate: u32,
    pub target_rms: f64,
    pub vocab_size: usize,
    /// Seed of the session id generator.
    pub id_seed: u64,
    pub session_dir: Option<PathBuf>,
    /// Run generation in the background and return immediately; clients
    /// poll the session until its status is idle again.
    pub async_generation: bool,
    pub sampler: SamplerConfig,
}

/// Request for one generation round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateRequest {
    pub seed: u64,
    pub lambda: f64,
}

/// Everything a generation needs, captured while the session is locked.
#[derive(Debug, Clone)]
pub struct GenerationJob {
    session_id: String,
    task: TaskSpec,
    locked: BTreeMap<usize, Vec<f32>>,
    prompt: PromptTokens,
    request: GenerateRequest,
}

impl GenerationJob {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }
}

/// Session store plus the model snapshot that serves generations.
pub struct Studio {
    model: RwLock<SharedModel>,
    codec: Codec,
    schedule: NoiseSchedule,
    config: StudioConfig,
    sessions: Mutex<HashMap<String, Session>>,
    ids: Mutex<StemRng>,
}

fn check_waveform(samples: &[f32], len: usize) -> Result<()> {
    if samples.len() != len {
        return Err(ServiceError::InvalidInput(format!(
            "track has {} samples, expected {len}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(ServiceError::InvalidInput(format!("sample {bad} outside [-1, 1]")));
    }
    Ok(())
}

impl Studio {
    pub fn new(model: SharedModel, codec: Codec, schedule: NoiseSchedule, config: StudioConfig) -> Result<Self> {
        let shape = model.latent_shape();
        if shape.channels != codec.frame_size() {
            return Err(ServiceError::Internal(format!(
                "model expects {} latent channels, codec produces {}",
                shape.channels,
                codec.frame_size()
            )));
        }
        config.sampler.validate()?;
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.session_dir {
            std::fs::create_dir_all(dir)?;
            for s in load_sessions(dir)? {
                sessions.insert(s.id.clone(), s);
            }
            log::info!("loaded {} sessions from {}", sessions.len(), dir.display());
        }
        Ok(Self {
            model: RwLock::new(model),
            codec,
            schedule,
            ids: Mutex::new(seeded(config.id_seed)),
            config,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn config(&self) -> &StudioConfig {
        &self.config
    }

    pub fn tracks(&self) -> usize {
        self.model().latent_shape().tracks
    }

    pub fn segment_length(&self) -> usize {
        self.model().latent_shape().frames * self.codec.frame_size()
    }

    fn model(&self) -> SharedModel {
        self.model.read().expect("model lock").clone()
    }

    /// Swaps the served model. Generations already running keep their snapshot.
    pub fn reload_model(&self, model: SharedModel) -> Result<()> {
        if model.latent_shape() != self.model().latent_shape() {
            return Err(ServiceError::InvalidInput("replacement model has a different latent shape".into()));
        }
        *self.model.write().expect("model lock") = model;
        Ok(())
    }

    fn sessions(&self) -> MutexGuard<'_, HashMap<String, Session>> {
        self.sessions.lock().expect("session lock")
    }

    fn persist(&self, s: &Session) -> Result<()> {
        match &self.config.session_dir {
            Some(dir) => save_session(dir, s),
            None => Ok(()),
        }
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let mut map = self.sessions();
        let s = map
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("no session `{id}`")))?;
        // Work on a copy so a failed mutation leaves the session untouched.
        let mut next = s.clone();
        let out = f(&mut next)?;
        if next != *s {
            self.persist(&next)?;
            *s = next;
        }
        Ok(out)
    }

    pub fn session_view(&self, id: &str) -> Result<SessionView> {
        let k = self.tracks();
        self.with_session(id, |s| Ok(s.view(k)))
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        self.with_session(id, |s| Ok(s.clone()))
    }

    fn fresh_id(&self, taken: &HashMap<String, Session>) -> String {
        let mut rng = self.ids.lock().expect("id lock");
        loop {
            let id = format!("{:016x}", rng.random::<u64>());
            if !taken.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn create_session(&self, prompt: Vec<u32>, uploads: Vec<(usize, Vec<f32>)>) -> Result<SessionView> {
        PromptTokens::new(0, prompt.clone()).validate(self.config.vocab_size)?;
        let (k, len) = (self.tracks(), self.segment_length());
        let mut locked = BTreeMap::new();
        for (track, samples) in uploads {
            if track >= k {
                return Err(ServiceError::InvalidInput(format!("track {track} out of range 0..{k}")));
            }
            check_waveform(&samples, len)?;
            if locked.contains_key(&track) {
                return Err(ServiceError::InvalidInput(format!("track {track} uploaded twice")));
            }
            locked.insert(
                track,
                LockedTrack {
                    samples,
                    provenance: Provenance::Uploaded,
                },
            );
        }
        let mut map = self.sessions();
        let mut s = Session::new(self.fresh_id(&map), prompt);
        s.locked = locked;
        self.persist(&s)?;
        let view = s.view(k);
        map.insert(s.id.clone(), s);
        Ok(view)
    }

    /// Marks the session as generating and captures its inputs. Fails with a
    /// conflict if a generation is already in flight.
    pub fn begin_generation(&self, id: &str, request: GenerateRequest) -> Result<GenerationJob> {
        if !request.lambda.is_finite() || request.lambda < 0.0 {
            return Err(ServiceError::InvalidInput(format!("lambda must be >= 0 (got {})", request.lambda)));
        }
        let k = self.tracks();
        self.with_session(id, |s| {
            if s.status == Status::Generating {
                return Err(ServiceError::Conflict(format!("session `{id}` is already generating")));
            }
            let given = TrackSet::from_indices(s.locked.keys().copied());
            let targets = TrackSet::all(k).difference(given);
            if targets.is_empty() {
                return Err(ServiceError::InvalidInput("every track is locked; nothing to generate".into()));
            }
            let task = TaskSpec::new(k, targets, given)?;
            s.status = Status::Generating;
            Ok(GenerationJob {
                session_id: id.to_string(),
                task,
                locked: s.locked.iter().map(|(&i, l)| (i, l.samples.clone())).collect(),
                prompt: PromptTokens::for_task(targets, &s.prompt),
                request,
            })
        })
    }

    /// Runs the sampler for a job. Pure computation; touches no session.
    pub fn run_generation(&self, job: &GenerationJob) -> Result<Vec<Vec<f32>>> {
        let model = self.model();
        let mut locked_latents = BTreeMap::new();
        for (&i, w) in &job.locked {
            let x: Vec<f64> = w.iter().map(|&v| v as f64).collect();
            locked_latents.insert(i, self.codec.encode(&x)?);
        }
        let cfg = SamplerConfig {
            guidance_scale: job.request.lambda,
            seed: job.request.seed,
            ..self.config.sampler
        };
        let z = sample(&*model, &job.task, &locked_latents, &job.prompt, &cfg, &self.schedule, &mut cfg.rng())?;
        (0..z.shape().tracks)
            .map(|i| match job.locked.get(&i) {
                Some(w) => Ok(w.clone()),
                None => Ok(self.codec.decode(z.track(i))?.iter().map(|&v| v as f32).collect()),
            })
            .collect()
    }

    /// Stores the result of a job and returns the session to idle.
    pub fn finish_generation(&self, job: &GenerationJob, result: Result<Vec<Vec<f32>>>) -> Result<Candidate> {
        self.with_session(&job.session_id, |s| {
            s.status = Status::Idle;
            Ok(())
        })?;
        let tracks = result?;
        self.with_session(&job.session_id, |s| {
            let c = Candidate {
                id: format!("c{}", s.candidates.len()),
                seed: job.request.seed,
                lambda: job.request.lambda,
                task: format_task(&job.task),
                tracks,
            };
            s.candidates.push(c.clone());
            Ok(c)
        })
    }

    /// Blocking generate: begin, sample, finish.
    pub fn generate(&self, id: &str, request: GenerateRequest) -> Result<Candidate> {
        let job = self.begin_generation(id, request)?;
        let result = self.run_generation(&job);
        self.finish_generation(&job, result)
    }

    pub fn select(&self, id: &str, candidate_id: &str, tracks: &[usize]) -> Result<SessionView> {
        let k = self.tracks();
        self.with_session(id, |s| {
            if s.status == Status::Generating {
                return Err(ServiceError::Conflict("session is generating".into()));
            }
            let c = s
                .candidate(candidate_id)
                .ok_or_else(|| ServiceError::NotFound(format!("no candidate `{candidate_id}`")))?
                .clone();
            if tracks.is_empty() {
                return Err(ServiceError::InvalidInput("no tracks selected".into()));
            }
            for &t in tracks {
                if t >= k {
                    return Err(ServiceError::InvalidInput(format!("track {t} out of range 0..{k}")));
                }
                if s.locked.contains_key(&t) {
                    return Err(ServiceError::Conflict(format!("track {t} is already locked")));
                }
                s.locked.insert(
                    t,
                    LockedTrack {
                        samples: c.tracks[t].clone(),
                        provenance: Provenance::Generated {
                            candidate_id: c.id.clone(),
                        },
                    },
                );
            }
            Ok(s.view(k))
        })
    }

    pub fn unlock(&self, id: &str, track: usize) -> Result<SessionView> {
        let k = self.tracks();
        self.with_session(id, |s| {
            if s.status == Status::Generating {
                return Err(ServiceError::Conflict("session is generating".into()));
            }
            if s.locked.remove(&track).is_none() {
                return Err(ServiceError::InvalidInput(format!("track {track} is not locked")));
            }
            Ok(s.view(k))
        })
    }

    pub fn upload(&self, id: &str, track: usize, samples: Vec<f32>) -> Result<SessionView> {
        let (k, len) = (self.tracks(), self.segment_length());
        if track >= k {
            return Err(ServiceError::InvalidInput(format!("track {track} out of range 0..{k}")));
        }
        check_waveform(&samples, len)?;
        self.with_session(id, |s| {
            if s.status == Status::Generating {
                return Err(ServiceError::Conflict("session is generating".into()));
            }
            s.locked.insert(
                track,
                LockedTrack {
                    samples,
                    provenance: Provenance::Uploaded,
                },
            );
            Ok(s.view(k))
        })
    }

    pub fn locked_track(&self, id: &str, track: usize) -> Result<Vec<f32>> {
        self.with_session(id, |s| {
            s.locked
                .get(&track)
                .map(|l| l.samples.clone())
                .ok_or_else(|| ServiceError::NotFound(format!("track {track} is not locked")))
        })
    }

    pub fn candidate_track(&self, id: &str, candidate_id: &str, track: usize) -> Result<Vec<f32>> {
        self.with_session(id, |s| {
            let c = s
                .candidate(candidate_id)
                .ok_or_else(|| ServiceError::NotFound(format!("no candidate `{candidate_id}`")))?;
            c.tracks
                .get(track)
                .cloned()
                .ok_or_else(|| ServiceError::NotFound(format!("no track {track}")))
        })
    }

    /// Mean of the locked stems at the target RMS; needs every track locked.
    pub fn render_mix(&self, id: &str) -> Result<Vec<f64>> {
        let k = self.tracks();
        let rms = self.config.target_rms;
        self.with_session(id, |s| {
            if !s.is_complete(k) {
                return Err(ServiceError::IncompleteSession(format!(
                    "{} of {k} tracks locked",
                    s.locked.len()
                )));
            }
            let stems: Vec<Vec<f64>> = s
                .locked
                .values()
                .map(|l| l.samples.iter().map(|&v| v as f64).collect())
                .collect();
            Ok(mix(&stems, rms)?)
        })
    }
}
