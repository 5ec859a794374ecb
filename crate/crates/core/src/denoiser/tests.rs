use super::*;
use crate::rng::{gaussian_vec, seeded};

fn reference_config() -> DenoiserConfig {
    DenoiserConfig {
        tracks: 4,
        latent_channels: 8,
        frames: 64,
        hidden_width: 32,
        depth: 2,
        timestep_embed_dim: 16,
        prompt_vocab_size: 64,
        prompt_embed_dim: 16,
        cond_mlp_width: 64,
    }
}

fn randomized(config: DenoiserConfig, seed: u64) -> Denoiser {
    let mut rng = seeded(seed);
    let mut m = Denoiser::new(config, &mut rng).unwrap();
    for v in m.params_mut().values_mut() {
        *v += 0.2 * gaussian_vec(&mut rng, 1)[0];
    }
    m
}

#[test]
fn parameter_count_matches_shape_audit() {
    // Frozen from tests/oracles/param_count.py.
    assert_eq!(reference_config().parameter_count(), 73_128);
    assert_eq!(DenoiserConfig::micro().parameter_count(), 1_342);
    let m = Denoiser::new(reference_config(), &mut seeded(1)).unwrap();
    assert_eq!(m.params().num_values(), 73_128);
}

#[test]
fn init_is_deterministic_and_predicts_zero() {
    let a = Denoiser::new(reference_config(), &mut seeded(5)).unwrap();
    let b = Denoiser::new(reference_config(), &mut seeded(5)).unwrap();
    assert_eq!(a.params().flatten(), b.params().flatten());
    assert!(a.params().get("out.weight").unwrap().data.iter().all(|&v| v == 0.0));

    let shape = reference_config().latent_shape();
    let z = TrackLatents::gaussian(shape, &mut seeded(2));
    let tvec = TimestepVector::new(vec![10, 0, 100, 10], 100).unwrap();
    let out = a.forward(&z, &tvec, &PromptTokens::new(3, vec![20, 30])).unwrap();
    assert_eq!(out.shape(), shape);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_statistics() {
    let m = Denoiser::new(reference_config(), &mut seeded(9)).unwrap();
    let emb = &m.params().get("prompt.embedding").unwrap().data;
    let std = (emb.iter().map(|v| v * v).sum::<f64>() / emb.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.002, "{std}");
    let w = &m.params().get("down.0.conv.weight").unwrap().data;
    let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
    let want = 1.0 / (32.0f64 * 3.0).sqrt();
    assert!((std - want).abs() < 0.1 * want, "{std} vs {want}");
    assert!(m.params().get("mid.norm.weight").unwrap().data.iter().all(|&v| v == 1.0));
}

#[test]
fn sinusoid_matches_closed_form() {
    let s = sinusoid(10.0, 4);
    let want = [-0.5440211108893698, 0.09983341664682815, -0.8390715290764524, 0.9950041652780258];
    for (a, b) in s.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn timestep_embedding_symmetry_and_order() {
    let config = DenoiserConfig::micro();
    let mut m = randomized(config, 3);
    let e = config.timestep_embed_dim;

    let zeros = m.embed_timesteps(&TimestepVector::new(vec![0, 0], 100).unwrap()).unwrap();
    assert_eq!(zeros.len(), 2 * e);
    let a = m.embed_timesteps(&TimestepVector::new(vec![100, 0], 100).unwrap()).unwrap();
    let b = m.embed_timesteps(&TimestepVector::new(vec![0, 100], 100).unwrap()).unwrap();
    assert_ne!(a, b);

    // Tie track 1 to track 0: equal timesteps then give equal halves, and
    // swapping them changes nothing.
    for suffix in ["weight", "bias"] {
        let src = m.params().get(&format!("temb.0.{suffix}")).unwrap().data.clone();
        m.params_mut().get_mut(&format!("temb.1.{suffix}")).unwrap().data = src;
    }
    let tied = m.embed_timesteps(&TimestepVector::new(vec![0, 0], 100).unwrap()).unwrap();
    for i in 0..e {
        assert!((tied[i] - tied[e + i]).abs() < 1e-12);
    }
    let x = m.embed_timesteps(&TimestepVector::new(vec![40, 40], 100).unwrap()).unwrap();
    let y = m.embed_timesteps(&TimestepVector::new(vec![40, 40], 100).unwrap()).unwrap();
    assert_eq!(x, y);
    let p = m.embed_timesteps(&TimestepVector::new(vec![100, 0], 100).unwrap()).unwrap();
    let q = m.embed_timesteps(&TimestepVector::new(vec![0, 100], 100).unwrap()).unwrap();
    for i in 0..e {
        assert!((p[i] - q[e + i]).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_and_shape_checked() {
    let config = DenoiserConfig::micro();
    let m = randomized(config, 4);
    let z = TrackLatents::gaussian(config.latent_shape(), &mut seeded(1));
    let tvec = TimestepVector::new(vec![5, 0], 100).unwrap();
    let prompt = PromptTokens::new(1, vec![4]);
    let a = m.forward(&z, &tvec, &prompt).unwrap();
    let b = m.forward(&z, &tvec, &prompt).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().any(|&v| v != 0.0));

    let wrong = TrackLatents::zeros(LatentShape::new(2, 2, 32));
    assert!(m.forward(&wrong, &tvec, &prompt).is_err());
    assert!(m.forward(&z, &tvec, &PromptTokens::new(8, vec![])).is_err());
    assert!(m.forward(&z, &TimestepVector::new(vec![5], 100).unwrap(), &prompt).is_err());
}

#[test]
fn prompt_prefix_changes_output() {
    let config = DenoiserConfig::micro();
    let m = randomized(config, 6);
    let z = TrackLatents::gaussian(config.latent_shape(), &mut seeded(1));
    let tvec = TimestepVector::new(vec![5, 0], 100).unwrap();
    let a = m.forward(&z, &tvec, &PromptTokens::new(1, vec![4])).unwrap();
    let b = m.forward(&z, &tvec, &PromptTokens::new(3, vec![4])).unwrap();
    assert_ne!(a, b);
}

#[test]
fn zero_loss_grad_gives_zero_gradients() {
    let config = DenoiserConfig::micro();
    let m = randomized(config, 7);
    let z = TrackLatents::gaussian(config.latent_shape(), &mut seeded(1));
    let tvec = TimestepVector::new(vec![5, 0], 100).unwrap();
    let g = m
        .backward(&z, &tvec, &PromptTokens::new(1, vec![4]), &TrackLatents::zeros(config.latent_shape()))
        .unwrap();
    assert!(g.values().all(|&v| v == 0.0));
    assert!(g.same_layout(m.params()));
}

#[test]
fn gradient_masked_to_target_track_leaves_other_output_rows_untouched() {
    let config = DenoiserConfig::micro();
    let m = randomized(config, 8);
    let shape = config.latent_shape();
    let z = TrackLatents::gaussian(shape, &mut seeded(1));
    let tvec = TimestepVector::new(vec![5, 0], 100).unwrap();
    // Loss gradient only on track 0, as a binary target mask produces.
    let mut lg = TrackLatents::from_vec(shape, gaussian_vec(&mut seeded(2), shape.len())).unwrap();
    lg.track_mut(1).fill(0.0);
    let g = m.backward(&z, &tvec, &PromptTokens::new(1, vec![4]), &lg).unwrap();
    let d = config.latent_channels;
    let w = &g.get("out.weight").unwrap().data;
    let row = config.hidden_width * 3;
    assert!(w[d * row..2 * d * row].iter().all(|&v| v == 0.0));
    assert!(w[..d * row].iter().any(|&v| v != 0.0));
    assert!(g.get("out.bias").unwrap().data[d..].iter().all(|&v| v == 0.0));
}

#[test]
fn full_gradient_sweep_on_micro_config() {
    let report = gradient_check(&DenoiserConfig::micro(), 11, 1e-4, 1e-4).unwrap();
    assert_eq!(report.checked, 1_342);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stmf");
    let m = randomized(DenoiserConfig::micro(), 12);
    let mut ck = Checkpoint::new(m.clone());
    ck.ema = Some(m.params().zeros_like());
    ck.step = 123_456_789;
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 123_456_789);
    assert_eq!(back.model.config(), m.config());
    for (a, b) in back.model.params().values().zip(m.params().values()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert!(back.ema.unwrap().values().all(|&v| v == 0.0));

    // Saving what was loaded reproduces the file byte for byte.
    let again = dir.path().join("again.stmf");
    Checkpoint::load(&path).unwrap().save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn config_validation() {
    let mut c = DenoiserConfig::micro();
    c.frames = 6;
    assert!(c.validate().is_err());
    let mut c = DenoiserConfig::micro();
    c.timestep_embed_dim = 3;
    assert!(c.validate().is_err());
    let mut c = DenoiserConfig::micro();
    c.hidden_width = 12;
    assert!(c.validate().is_err());
    let mut c = DenoiserConfig::micro();
    c.prompt_embed_dim = 0;
    assert!(c.validate().is_err());
}
