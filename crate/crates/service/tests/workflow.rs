use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use stemforge_core::data::{Codec, CodecKind};
use stemforge_core::denoiser::{Denoiser, DenoiserConfig};
use stemforge_core::diffusion::{LatentShape, NoisePredictor, NoiseSchedule, SamplerConfig, TimestepVector, TrackLatents};
use stemforge_core::prompt::PromptTokens;
use stemforge_core::rng::seeded;
use stemforge_core::wav::decode_wav;
use stemforge_service::http::{Generated, Select};
use stemforge_service::{
    accept_loop, router, GenerateRequest, LocalClient, Provenance, SessionView, SharedModel, Studio, StudioConfig,
};

const K: usize = 4;
const D: usize = 8;
const FRAMES: usize = 16;
const LEN: usize = D * FRAMES;
const RATE: u32 = 4000;

fn model() -> Denoiser {
    let cfg = DenoiserConfig {
        tracks: K,
        latent_channels: D,
        frames: FRAMES,
        hidden_width: 8,
        depth: 2,
        timestep_embed_dim: 4,
        prompt_vocab_size: 27,
        prompt_embed_dim: 4,
        cond_mlp_width: 8,
    };
    let mut m = Denoiser::new(cfg, &mut seeded(3)).unwrap();
    // Give the zero-initialized output layer some weight so predictions vary.
    let mut rng = seeded(4);
    for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("out.") || p.name.starts_with("skip.")) {
        p.data = stemforge_core::rng::gaussian_vec(&mut rng, p.data.len()).iter().map(|v| 0.05 * v).collect();
    }
    m
}

/// Wraps a model and sleeps on every call, keeping a generation in flight.
struct Slow(Denoiser);

impl NoisePredictor for Slow {
    fn latent_shape(&self) -> LatentShape {
        self.0.latent_shape()
    }

    fn predict(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> stemforge_core::Result<TrackLatents> {
        std::thread::sleep(Duration::from_millis(2));
        self.0.predict(z, tvec, prompt)
    }
}

fn config(dir: Option<std::path::PathBuf>, async_generation: bool) -> StudioConfig {
    StudioConfig {
        sample_rate: RATE,
        target_rms: 0.1,
        vocab_size: 27,
        id_seed: 1,
        session_dir: dir,
        async_generation,
        sampler: SamplerConfig::default(),
    }
}

fn studio_with(model: SharedModel, dir: Option<std::path::PathBuf>, async_generation: bool) -> Arc<Studio> {
    let codec = Codec::new(CodecKind::IdentityFrames, D, 0).unwrap();
    let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
    Arc::new(Studio::new(model, codec, schedule, config(dir, async_generation)).unwrap())
}

fn studio() -> Arc<Studio> {
    studio_with(Arc::new(model()), None, false)
}

fn tone(freq: f64) -> Vec<f32> {
    (0..LEN)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / RATE as f64).sin()) as f32)
        .collect()
}

#[tokio::test]
async fn scripted_user_one_track_per_round() {
    let client = LocalClient::new(router(studio()));
    let r = accept_loop(&client, &[16, 20, 23], 1, 10, 7.0).await.unwrap();
    assert_eq!(r.joint_rounds, 1);
    assert_eq!(r.conditional_rounds, K - 1);
    assert!(r.locked_unchanged);
    assert!(r.rejected_after_completion);
    let mix = decode_wav(&r.mix_wav).unwrap();
    assert_eq!(mix.samples.len(), LEN);
}

#[tokio::test]
async fn scripted_user_accepting_everything_needs_one_round() {
    let client = LocalClient::new(router(studio()));
    let r = accept_loop(&client, &[16], K, 0, 7.0).await.unwrap();
    assert_eq!((r.joint_rounds, r.conditional_rounds), (1, 0));
}

#[tokio::test]
async fn wav_endpoints_are_riff_and_byte_stable() {
    let client = LocalClient::new(router(studio()));
    let r = accept_loop(&client, &[16], 2, 5, 7.0).await.unwrap();
    let base = format!("/sessions/{}", r.session_id);
    for path in ["tracks/0.wav", "tracks/3.wav", "mix.wav", "candidates/c0/tracks/1.wav"] {
        let a = client.get(&format!("{base}/{path}")).await;
        let b = client.get(&format!("{base}/{path}")).await;
        assert_eq!(a.status, StatusCode::OK, "{path}");
        assert_eq!(a.body, b.body, "{path}");
        assert_eq!(&a.body[..4], b"RIFF");
        assert_eq!(&a.body[8..16], b"WAVEfmt ");
        let w = decode_wav(&a.body).unwrap();
        assert_eq!((w.sample_rate, w.samples.len()), (RATE, LEN));
    }
    let missing = client.get(&format!("{base}/tracks/9.wav")).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    assert_eq!(missing.error().unwrap().code, "not_found");
}

#[tokio::test]
async fn conditional_generation_is_deterministic_and_keeps_locked_bytes() {
    let st = studio();
    let bass = tone(125.0);
    let id = st.create_session(vec![16], vec![(1, bass.clone())]).unwrap().id;
    let req = GenerateRequest { seed: 9, lambda: 7.0 };
    let a = st.generate(&id, req).unwrap();
    let b = st.generate(&id, req).unwrap();
    assert_eq!(a.tracks, b.tracks);
    assert_eq!(a.tracks[1], bass);
    assert_eq!(st.locked_track(&id, 1).unwrap(), bass);
    assert_eq!(a.task, "bass,instrument,melody | given drums");
    let c = st.generate(&id, GenerateRequest { seed: 10, lambda: 7.0 }).unwrap();
    assert_ne!(a.tracks[0], c.tracks[0]);
}

#[tokio::test]
async fn concurrent_generates_single_flight() {
    let st = studio_with(Arc::new(Slow(model())), None, false);
    let id = st.create_session(vec![16], vec![]).unwrap().id;
    let client = LocalClient::new(router(st));
    let uri = format!("/sessions/{id}/generate");
    let body = serde_json::json!({"seed": 1});
    let replies = futures_join(&client, &uri, &body, 4).await;
    let ok = replies.iter().filter(|r| r.status == StatusCode::OK).count();
    let conflicts: Vec<_> = replies.iter().filter(|r| r.status == StatusCode::CONFLICT).collect();
    assert_eq!(ok, 1);
    assert_eq!(conflicts.len(), 3);
    assert!(conflicts.iter().all(|r| r.error().unwrap().code == "conflict"));
    // The session is idle again and holds exactly one candidate.
    let view: SessionView = client.get(&format!("/sessions/{id}")).await.json().unwrap();
    assert_eq!(view.candidates.len(), 1);
    assert_eq!(view.status, stemforge_service::Status::Idle);
}

async fn futures_join(client: &LocalClient, uri: &str, body: &serde_json::Value, n: usize) -> Vec<stemforge_service::Reply> {
    let handles: Vec<_> = (0..n)
        .map(|_| {
            let (c, u, b) = (client.clone(), uri.to_string(), body.clone());
            tokio::spawn(async move { c.post(&u, &b).await })
        })
        .collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn async_mode_completes_in_background() {
    let st = studio_with(Arc::new(model()), None, true);
    let client = LocalClient::new(router(st));
    let id: stemforge_service::http::Created =
        client.post("/sessions", &serde_json::json!({"prompt_tokens": [16]})).await.json().unwrap();
    let base = format!("/sessions/{}", id.session_id);
    let r = client.post(&format!("{base}/generate"), &serde_json::json!({"seed": 2})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let g: Generated = r.json().unwrap();
    assert!(g.candidate_id.is_none());
    let mut view: SessionView = client.get(&base).await.json().unwrap();
    for _ in 0..500 {
        if view.candidates.len() == 1 && view.status == stemforge_service::Status::Idle {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
        view = client.get(&base).await.json().unwrap();
    }
    assert_eq!(view.candidates.len(), 1);
}

#[tokio::test]
async fn selection_unlock_and_upload_rules() {
    let st = studio();
    let id = st.create_session(vec![16], vec![]).unwrap().id;
    let c = st.generate(&id, GenerateRequest { seed: 1, lambda: 7.0 }).unwrap();
    let v = st.select(&id, &c.id, &[0, 2]).unwrap();
    assert_eq!(v.locked.len(), 2);
    assert!(matches!(&v.locked[0].provenance, Provenance::Generated { candidate_id } if *candidate_id == c.id));

    let before = st.session(&id).unwrap();
    assert!(st.select(&id, "c7", &[1]).is_err());
    assert!(st.select(&id, &c.id, &[0]).is_err());
    assert_eq!(st.session(&id).unwrap(), before);

    // Upload over a generated track switches provenance.
    let v = st.upload(&id, 2, tone(250.0)).unwrap();
    assert_eq!(v.locked[1].provenance, Provenance::Uploaded);
    assert!(st.upload(&id, 2, vec![0.0; LEN - 1]).is_err());
    assert!(st.upload(&id, 2, vec![1.5; LEN]).is_err());
    assert!(st.upload(&id, K, tone(100.0)).is_err());

    // Unlocked tracks become targets again.
    st.unlock(&id, 0).unwrap();
    assert!(st.unlock(&id, 0).is_err());
    let c2 = st.generate(&id, GenerateRequest { seed: 2, lambda: 7.0 }).unwrap();
    assert!(c2.task.starts_with("bass,drums,melody"));

    assert!(st.render_mix(&id).is_err());
}

#[tokio::test]
async fn everything_locked_rejects_generate_and_mixes() {
    let st = studio();
    let uploads = (0..K).map(|k| (k, tone(100.0 * (k + 1) as f64))).collect();
    let id = st.create_session(vec![], uploads).unwrap().id;
    assert!(st.generate(&id, GenerateRequest { seed: 0, lambda: 7.0 }).is_err());
    let mix = st.render_mix(&id).unwrap();
    let rms = (mix.iter().map(|v| v * v).sum::<f64>() / mix.len() as f64).sqrt();
    assert!((rms - 0.1).abs() < 1e-9);
}

#[tokio::test]
async fn identical_stems_mix_to_the_rescaled_stem() {
    let st = studio();
    let w = tone(300.0);
    let id = st.create_session(vec![], (0..K).map(|k| (k, w.clone())).collect()).unwrap().id;
    let mix = st.render_mix(&id).unwrap();
    let x: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    for (m, v) in mix.iter().zip(&x) {
        assert!((m - v * 0.1 / rms).abs() < 1e-12);
    }
}

#[tokio::test]
async fn http_errors_are_machine_readable() {
    let client = LocalClient::new(router(studio()));
    let r = client.get("/sessions/nope").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error().unwrap().code, "not_found");

    let r = client.post("/sessions", &serde_json::json!({"prompt_tokens": [99]})).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.error().unwrap().code, "invalid_input");

    let r = client
        .post("/sessions", &serde_json::json!({"uploads": [{"track": 0, "samples": [0.0, 0.1]}]}))
        .await;
    assert_eq!(r.error().unwrap().code, "invalid_input");

    let created: stemforge_service::http::Created =
        client.post("/sessions", &serde_json::json!({})).await.json().unwrap();
    let r = client.get(&format!("/sessions/{}/mix.wav", created.session_id)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.error().unwrap().code, "incomplete_session");

    let r = client
        .post(
            &format!("/sessions/{}/select", created.session_id),
            &Select {
                candidate_id: "c0".into(),
                tracks: vec![0],
            },
        )
        .await;
    assert_eq!(r.error().unwrap().code, "not_found");
}

#[test]
fn ten_thousand_distinct_session_ids() {
    let st = studio();
    let ids: HashSet<String> = (0..10_000).map(|_| st.create_session(vec![], vec![]).unwrap().id).collect();
    assert_eq!(ids.len(), 10_000);
}

#[test]
fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let st = studio_with(Arc::new(model()), Some(dir.path().to_path_buf()), false);
    let id = st.create_session(vec![16, 20], vec![(3, tone(150.0))]).unwrap().id;
    let c = st.generate(&id, GenerateRequest { seed: 4, lambda: 3.5 }).unwrap();
    st.select(&id, &c.id, &[0]).unwrap();
    let before = st.session(&id).unwrap();
    drop(st);
    let st = studio_with(Arc::new(model()), Some(dir.path().to_path_buf()), false);
    assert_eq!(st.session(&id).unwrap(), before);
}
