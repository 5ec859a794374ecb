//! Command bodies. Each returns the paths it wrote so the caller can hash them
//! into a [`RunManifest`](crate::manifest::RunManifest).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use stemforge_core::config::{Preset, RunConfig};
use stemforge_core::data::{generate_dataset, mix, read_dataset, write_dataset, Dataset, DatasetHeader, TRACKS};
use stemforge_core::denoiser::{gradient_check, Checkpoint, Denoiser, DenoiserConfig, GradcheckReport};
use stemforge_core::diffusion::{sample, NoisePredictor, SamplerConfig, TaskSpec, TrackLatents};
use stemforge_core::eval::{
    coherence_eval, coherence_records, conditional_coherence, frechet_ordering, generate_mixes, write_csv,
    write_ndjson, MetricRecord,
};
use stemforge_core::prompt::{parse_task, track_name, PromptTokens};
use stemforge_core::rng::seeded;
use stemforge_core::tensorfile::{self, NamedTensor};
use stemforge_core::train::{train, TrainOptions};
use stemforge_core::wav::{read_wav, write_wav};
use stemforge_core::Error;
use stemforge_service::{Studio, StudioConfig};

use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.stmf";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const LATENTS_FILE: &str = "latents.stmf";

/// Finite-difference step of the gradient check.
pub const GRADCHECK_STEP: f64 = 1e-4;

/// A configuration together with the file it came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub path: Option<PathBuf>,
}

/// `checkpoint` may name the file or the directory written by `train`.
pub fn checkpoint_file(checkpoint: &Path) -> PathBuf {
    if checkpoint.is_dir() {
        checkpoint.join(CHECKPOINT_FILE)
    } else {
        checkpoint.to_path_buf()
    }
}

/// Loads `--config` when given, else the config saved next to `checkpoint`,
/// else the built-in defaults. `preset` applies in every case.
pub fn resolve_config(path: Option<&Path>, preset: Option<Preset>, checkpoint: Option<&Path>) -> Result<Resolved> {
    let beside = checkpoint
        .map(checkpoint_file)
        .and_then(|c| c.parent().map(|p| p.join(CONFIG_FILE)))
        .filter(|p| p.is_file());
    let path = path.map(Path::to_path_buf).or(beside);
    let text = match &path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => String::new(),
    };
    let config = RunConfig::parse_with_preset(&text, preset).map_err(|e| match (&path, e) {
        (Some(p), Error::InvalidConfig(m)) => Error::InvalidConfig(format!("{}: {m}", p.display())),
        (_, e) => e,
    })?;
    Ok(Resolved { config, path })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a dataset and checks that it matches the configured layout.
pub fn load_dataset(config: &RunConfig, path: &Path) -> Result<Dataset> {
    let data = read_dataset(path).map_err(|e| match e {
        Error::Io(err) => CliError::io(path, err),
        e => e.into(),
    })?;
    let want = DatasetHeader::for_config(&config.dataset);
    if data.header != want {
        return Err(Error::InvalidConfig(format!(
            "{} has layout {:?}, the configuration expects {:?}",
            path.display(),
            data.header,
            want
        ))
        .into());
    }
    if data.samples.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no samples", path.display())).into());
    }
    Ok(data)
}

pub fn load_model(checkpoint: &Path, config: &RunConfig) -> Result<Denoiser> {
    let file = checkpoint_file(checkpoint);
    let ckpt = Checkpoint::load(&file).map_err(|e| match e {
        Error::Io(err) => CliError::io(&file, err),
        e => e.into(),
    })?;
    let model = ckpt.inference_model()?;
    let want = config.dataset.latent_shape();
    if model.latent_shape() != want {
        return Err(Error::InvalidConfig(format!(
            "checkpoint latent shape {:?} does not match the dataset layout {:?}",
            model.latent_shape(),
            want
        ))
        .into());
    }
    Ok(model)
}

/// Writes `num_samples` synthetic four-stem samples to `out`.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let dc = &config.dataset;
    let samples = generate_dataset(dc)?;
    create_parent(out)?;
    write_dataset(out, &DatasetHeader::for_config(dc), &samples)?;
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(vec![out.to_path_buf()])
}

fn save_run(out: &Path, config: &RunConfig, checkpoint: &Checkpoint) -> Result<()> {
    create_dir(out)?;
    checkpoint.save(out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(CONFIG_FILE), &config.to_text())
}

/// An untrained checkpoint laid out like the output of [`cmd_train`].
pub fn cmd_init(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let model = Denoiser::new(config.denoiser_config(), &mut seeded(config.init_seed))?;
    save_run(out, config, &Checkpoint::new(model))?;
    Ok(vec![out.to_path_buf()])
}

/// Trains on `data` and writes the checkpoint (student plus EMA), the
/// per-epoch metrics and the resolved configuration into `out`.
pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let dataset = load_dataset(config, data)?;
    let codec = config.dataset.codec()?;
    let examples = dataset
        .samples
        .iter()
        .map(|s| s.to_example(&codec))
        .collect::<stemforge_core::Result<Vec<_>>>()?;
    let model = Denoiser::new(config.denoiser_config(), &mut seeded(config.init_seed))?;
    log::info!(
        "training {} parameters on {} samples for {} epochs",
        model.params().num_values(),
        examples.len(),
        config.train.epochs
    );
    let options = TrainOptions {
        teacher_sampler: config.sampler,
        dump_path: None,
    };
    let outcome = train(
        model,
        &examples,
        config.curriculum_config(),
        config.train.clone(),
        config.schedule.build()?,
        &options,
        |_| {},
    )?;
    save_run(out, config, &outcome.checkpoint)?;
    // Wall time is left out so that reruns produce identical bytes.
    let mut lines = String::new();
    for m in &outcome.metrics {
        let mut v = serde_json::to_value(m).expect("metrics serialize");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_s");
        }
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    write_text(&out.join(METRICS_FILE), &lines)?;
    Ok(vec![out.to_path_buf()])
}

/// Where the clean tracks for a conditional task come from.
#[derive(Debug, Clone)]
pub enum TrackSource {
    None,
    /// `{name}.wav` files in a directory.
    Directory(PathBuf),
    /// One sample of a dataset file.
    Dataset { path: PathBuf, index: usize },
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub task: String,
    /// Prompt content tokens; defaults to the dataset sample's when one is given.
    pub prompt: Option<Vec<u32>>,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub source: TrackSource,
    pub out: PathBuf,
}

fn read_track(dir: &Path, k: usize, track: usize, config: &RunConfig) -> Result<Vec<f64>> {
    let path = dir.join(format!("{}.wav", track_name(k, track)));
    let wav = read_wav(&path).map_err(|e| match e {
        Error::Io(err) => CliError::io(&path, err),
        e => e.into(),
    })?;
    let dc = &config.dataset;
    if wav.sample_rate != dc.sample_rate || wav.samples.len() != dc.segment_length {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} samples at {} Hz, got {} at {} Hz",
            path.display(),
            dc.segment_length,
            dc.sample_rate,
            wav.samples.len(),
            wav.sample_rate
        ))
        .into());
    }
    Ok(wav.samples)
}

/// Generates the task's target tracks and writes the decoded waveforms of
/// every non-marginal track, the raw latents and, when no track is marginal,
/// the mix.
pub fn cmd_sample(config: &RunConfig, args: &SampleArgs) -> Result<Vec<PathBuf>> {
    let model = load_model(&args.checkpoint, config)?;
    let shape = model.latent_shape();
    let k = shape.tracks;
    let task: TaskSpec = parse_task(k, &args.task)?;
    let codec = config.dataset.codec()?;

    let (clean, content): (BTreeMap<usize, Vec<f64>>, Vec<u32>) = match &args.source {
        TrackSource::None => (BTreeMap::new(), Vec::new()),
        TrackSource::Directory(dir) => {
            let tracks = task
                .conditional()
                .iter()
                .map(|i| Ok((i, read_track(dir, k, i, config)?)))
                .collect::<Result<_>>()?;
            (tracks, Vec::new())
        }
        TrackSource::Dataset { path, index } => {
            let data = load_dataset(config, path)?;
            let s = data.samples.get(*index).ok_or_else(|| {
                Error::InvalidInput(format!("{} has {} samples, no index {index}", path.display(), data.samples.len()))
            })?;
            let tracks = task.conditional().iter().map(|i| (i, s.waveform_f64(i))).collect();
            (tracks, s.content.clone())
        }
    };
    if let Some(missing) = task.conditional().iter().find(|i| !clean.contains_key(i)) {
        return Err(Error::MissingLocked(missing).into());
    }
    let content = args.prompt.clone().unwrap_or(content);
    let prompt = PromptTokens::for_task(task.targets(), &content);
    prompt.validate(config.dataset.vocab().size())?;

    let locked = clean
        .iter()
        .map(|(&i, x)| Ok((i, codec.encode(x)?)))
        .collect::<stemforge_core::Result<BTreeMap<_, _>>>()?;
    let sampler = SamplerConfig {
        seed: args.seed,
        guidance_scale: args.lambda.unwrap_or(config.sampler.guidance_scale),
        ..config.sampler
    };
    let schedule = config.schedule.build()?;
    let mut rng = sampler.rng();
    let z: TrackLatents = sample(&model, &task, &locked, &prompt, &sampler, &schedule, &mut rng)?;
    if !z.is_finite() {
        return Err(Error::NonFinite("sampled latents".into()).into());
    }

    create_dir(&args.out)?;
    let latents = NamedTensor::from_f64("latents", vec![k, shape.channels, shape.frames], z.data());
    tensorfile::write(args.out.join(LATENTS_FILE), &[latents])?;
    let sr = config.dataset.sample_rate;
    let mut decoded = Vec::new();
    for i in 0..k {
        if task.marginal().contains(i) {
            continue;
        }
        let x = codec.decode(z.track(i))?;
        write_wav(args.out.join(format!("{}.wav", track_name(k, i))), &x, sr)?;
        decoded.push(x);
    }
    if decoded.len() == k {
        write_wav(args.out.join("mix.wav"), &mix(&decoded, config.dataset.target_rms)?, sr)?;
    }
    Ok(vec![args.out.clone()])
}

#[derive(Debug, Clone)]
pub enum EvalSubject {
    /// Generate from a checkpoint: conditional generations given the
    /// reference bass, and joint mixes compared against the reference mixes.
    Checkpoint {
        path: PathBuf,
        generations: usize,
        mixes: usize,
    },
    /// Score `{name}.wav` files against one reference sample.
    Tracks { dir: PathBuf, index: usize },
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub subject: EvalSubject,
    pub data: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

/// Pass threshold for the share of conditional generations whose
/// instrument/bass ratio matches.
pub const RATIO_PASS_THRESHOLD: f64 = 0.7;

pub fn eval_records(config: &RunConfig, args: &EvalArgs) -> Result<Vec<MetricRecord>> {
    let data = load_dataset(config, &args.data)?;
    let dc = &config.dataset;
    let mut records = Vec::new();
    match &args.subject {
        EvalSubject::Checkpoint {
            path,
            generations,
            mixes,
        } => {
            let model = load_model(path, config)?;
            let codec = dc.codec()?;
            let schedule = config.schedule.build()?;
            let sampler = SamplerConfig {
                seed: args.seed,
                ..config.sampler
            };
            let n = (*generations).min(data.samples.len());
            let cond = conditional_coherence(&model, &schedule, &sampler, &data.samples[..n], &codec, dc.sample_rate)?;
            records.push(MetricRecord::check(
                "instrument_bass_ratio_pass_rate",
                cond.ratio_pass_rate,
                RATIO_PASS_THRESHOLD,
                cond.ratio_pass_rate >= RATIO_PASS_THRESHOLD,
            ));
            for (g, report) in cond.reports.iter().enumerate() {
                for mut r in coherence_records(report) {
                    r.metric = format!("generation{g}.{}", r.metric);
                    records.push(r);
                }
            }
            let m = (*mixes).min(data.samples.len());
            let refs = &data.samples[..m];
            let contents: Vec<Vec<u32>> = refs.iter().map(|s| s.content.clone()).collect();
            let generated = generate_mixes(&model, &schedule, &sampler, &contents, &codec, dc.target_rms)?;
            let heldout = refs
                .iter()
                .map(|s| mix(&(0..TRACKS).map(|k| s.waveform_f64(k)).collect::<Vec<_>>(), dc.target_rms))
                .collect::<stemforge_core::Result<Vec<_>>>()?;
            let f = frechet_ordering(&generated, &heldout, args.seed)?;
            records.push(MetricRecord::value("frechet_generated_vs_heldout", f.generated_vs_heldout));
            records.push(MetricRecord::value("frechet_heldout_vs_noisy", f.heldout_vs_noisy));
            records.push(MetricRecord::check(
                "frechet_ordering",
                f.generated_vs_heldout - f.heldout_vs_noisy,
                0.0,
                f.pass(),
            ));
        }
        EvalSubject::Tracks { dir, index } => {
            let s = data.samples.get(*index).ok_or_else(|| {
                Error::InvalidInput(format!("{} has no sample {index}", args.data.display()))
            })?;
            let tracks = (0..TRACKS)
                .map(|k| read_track(dir, TRACKS, k, config))
                .collect::<Result<Vec<_>>>()?;
            let report = coherence_eval(&tracks, dc.sample_rate, &s.meta)?;
            records.extend(coherence_records(&report));
        }
    }
    Ok(records)
}

/// Writes `metrics.csv` and `metrics.ndjson` into `out`.
pub fn cmd_eval(config: &RunConfig, args: &EvalArgs) -> Result<Vec<PathBuf>> {
    let records = eval_records(config, args)?;
    create_dir(&args.out)?;
    let csv = args.out.join("metrics.csv");
    let nd = args.out.join(METRICS_FILE);
    let open = |p: &Path| fs::File::create(p).map(BufWriter::new).map_err(|e| CliError::io(p, e));
    write_csv(open(&csv)?, &records)?;
    write_ndjson(open(&nd)?, &records)?;
    for r in records.iter().filter(|r| !r.metric.starts_with("generation")) {
        log::info!("{} = {:.4} pass {:?}", r.metric, r.value, r.pass);
    }
    Ok(vec![args.out.clone()])
}

/// Runs the finite-difference sweep over every parameter of `model`
/// (the micro network when `None`).
pub fn cmd_gradcheck(model: Option<&DenoiserConfig>, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let cfg = model.cloned().unwrap_or_else(DenoiserConfig::micro);
    log::info!("checking {} parameters", cfg.parameter_count());
    let report = gradient_check(&cfg, seed, GRADCHECK_STEP, tolerance)?;
    if !report.passed() {
        return Err(CliError::Gradcheck {
            failures: report.failures,
            checked: report.checked,
            tolerance: report.tolerance,
            max_rel_err: report.max_rel_err,
            worst: format!("{}[{}]", report.worst.0, report.worst.1),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ServeArgs {
    pub checkpoint: PathBuf,
    pub port: u16,
    pub session_dir: Option<PathBuf>,
    pub async_generation: bool,
    pub seed: u64,
}

pub fn build_studio(config: &RunConfig, args: &ServeArgs) -> Result<Studio> {
    let model = load_model(&args.checkpoint, config)?;
    let model: Arc<dyn NoisePredictor + Send + Sync> = Arc::new(model);
    let dc = &config.dataset;
    let studio_config = StudioConfig {
        sample_rate: dc.sample_rate,
        target_rms: dc.target_rms,
        vocab_size: dc.vocab().size(),
        id_seed: args.seed,
        session_dir: args.session_dir.clone(),
        async_generation: args.async_generation,
        sampler: config.sampler,
    };
    Ok(Studio::new(model, dc.codec()?, config.schedule.build()?, studio_config)?)
}

pub fn cmd_serve(studio: Studio, port: u16) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(stemforge_service::serve(Arc::new(studio), port))
        .map_err(|e| CliError::io(format!("127.0.0.1:{port}"), e))
}
