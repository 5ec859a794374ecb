use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stemforge_core::config::Preset;

use crate::commands::{
    build_studio, checkpoint_file, cmd_eval, cmd_gradcheck, cmd_init, cmd_sample, cmd_serve, cmd_synth, cmd_train,
    resolve_config, EvalArgs, EvalSubject, Resolved, SampleArgs, ServeArgs, TrackSource,
};
use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "stemforge", version, about = "Multi-track stem diffusion at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer preset; explicit `train.*` keys in the config still win.
    #[arg(long)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic four-stem dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `dataset.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an untrained checkpoint directory.
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `model.init_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset file and write a checkpoint directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate tracks for a task such as `bass,drums | given melody,instrument`.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "bass,drums,instrument,melody")]
        task: String,
        /// Comma-separated prompt content token ids.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lambda: Option<f64>,
        /// Dataset holding the conditioning tracks and prompt.
        #[arg(long, conflicts_with = "tracks")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Directory of `{track}.wav` conditioning files.
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or a directory of generated tracks against a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "tracks")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        tracks: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Reference sample for `--tracks`.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 64)]
        generations: usize,
        #[arg(long, default_value_t = 128)]
        mixes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter gradient. Uses the micro
    /// network unless `--config` is given.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Where to write the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the session API on 127.0.0.1.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        session_dir: Option<PathBuf>,
        /// Return from generate immediately and let clients poll.
        #[arg(long = "async")]
        async_generation: bool,
        /// Seed of the session id generator.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_prompt(raw: &str) -> Result<Vec<u32>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("bad prompt token `{s}`"))))
        .collect()
}

fn resolve(cfg: &ConfigArgs, checkpoint: Option<&Path>) -> Result<Resolved> {
    resolve_config(cfg.config.as_deref(), cfg.preset, checkpoint)
}

fn builder(name: &str, r: &Resolved) -> ManifestBuilder {
    ManifestBuilder::new(name, r.path.as_deref(), &r.config.to_text())
}

#[derive(Serialize)]
struct GradcheckLine<'a> {
    checked: usize,
    max_rel_err: f64,
    worst: &'a str,
    tolerance: f64,
    passed: bool,
}

/// Runs one command and returns its manifest, written next to the outputs
/// when the command has any.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let start = Instant::now();
    let finish = |b: ManifestBuilder, outputs: Vec<PathBuf>, out: Option<&Path>| -> Result<RunManifest> {
        let m = b.finish(&outputs, start.elapsed().as_secs_f64())?;
        if let Some(out) = out {
            let path = m.write(out)?;
            log::info!("manifest written to {}", path.display());
        }
        Ok(m)
    };
    match cli.command {
        Command::Synth { cfg, seed, out } => {
            let mut r = resolve(&cfg, None)?;
            if let Some(s) = seed {
                r.config.dataset.seed = s;
            }
            let b = builder("synth", &r).seed(r.config.dataset.seed);
            finish(b, cmd_synth(&r.config, &out)?, Some(&out))
        }
        Command::Init { cfg, seed, out } => {
            let mut r = resolve(&cfg, None)?;
            if let Some(s) = seed {
                r.config.init_seed = s;
            }
            let b = builder("init", &r).seed(r.config.init_seed);
            finish(b, cmd_init(&r.config, &out)?, Some(&out))
        }
        Command::Train { cfg, data, seed, out } => {
            let mut r = resolve(&cfg, None)?;
            if let Some(s) = seed {
                r.config.train.seed = s;
            }
            let b = builder("train", &r).seed(r.config.train.seed).input(&data)?;
            finish(b, cmd_train(&r.config, &data, &out)?, Some(&out))
        }
        Command::Sample {
            cfg,
            checkpoint,
            task,
            prompt,
            seed,
            lambda,
            data,
            index,
            tracks,
            out,
        } => {
            let r = resolve(&cfg, Some(&checkpoint))?;
            let mut b = builder("sample", &r)
                .seed(seed)
                .arg("task", &task)
                .arg("prompt", prompt.as_deref().unwrap_or("-"))
                .arg("lambda", lambda.map_or("-".into(), |l| l.to_string()))
                .input(&checkpoint_file(&checkpoint))?;
            let source = match (data, tracks) {
                (Some(path), _) => {
                    b = b.arg("index", index).input(&path)?;
                    TrackSource::Dataset { path, index }
                }
                (None, Some(dir)) => {
                    b = b.input(&dir)?;
                    TrackSource::Directory(dir)
                }
                (None, None) => TrackSource::None,
            };
            let args = SampleArgs {
                checkpoint,
                task,
                prompt: prompt.as_deref().map(parse_prompt).transpose()?,
                seed,
                lambda,
                source,
                out: out.clone(),
            };
            finish(b, cmd_sample(&r.config, &args)?, Some(&out))
        }
        Command::Eval {
            cfg,
            checkpoint,
            tracks,
            data,
            index,
            generations,
            mixes,
            seed,
            out,
        } => {
            let r = resolve(&cfg, checkpoint.as_deref())?;
            let mut b = builder("eval", &r).seed(seed).input(&data)?;
            let subject = match (checkpoint, tracks) {
                (Some(path), _) => {
                    b = b
                        .arg("generations", generations)
                        .arg("mixes", mixes)
                        .input(&checkpoint_file(&path))?;
                    EvalSubject::Checkpoint {
                        path,
                        generations,
                        mixes,
                    }
                }
                (None, Some(dir)) => {
                    b = b.arg("index", index).input(&dir)?;
                    EvalSubject::Tracks { dir, index }
                }
                (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --tracks".into())),
            };
            let args = EvalArgs {
                subject,
                data,
                seed,
                out: out.clone(),
            };
            finish(b, cmd_eval(&r.config, &args)?, Some(&out))
        }
        Command::Gradcheck {
            cfg,
            seed,
            tolerance,
            out,
        } => {
            let r = resolve(&cfg, None)?;
            let model = cfg.config.as_ref().map(|_| r.config.denoiser_config());
            let b = builder("gradcheck", &r).seed(seed).arg("tolerance", tolerance);
            let report = cmd_gradcheck(model.as_ref(), seed, tolerance)?;
            let worst = format!("{}[{}]", report.worst.0, report.worst.1);
            let line = serde_json::to_string(&GradcheckLine {
                checked: report.checked,
                max_rel_err: report.max_rel_err,
                worst: &worst,
                tolerance: report.tolerance,
                passed: report.passed(),
            })
            .expect("report serializes");
            println!("{line}");
            let outputs = match &out {
                Some(p) => {
                    std::fs::write(p, format!("{line}\n")).map_err(|e| CliError::io(p, e))?;
                    vec![p.clone()]
                }
                None => Vec::new(),
            };
            finish(b, outputs, out.as_deref())
        }
        Command::Serve {
            cfg,
            checkpoint,
            port,
            session_dir,
            async_generation,
            seed,
        } => {
            let r = resolve(&cfg, Some(&checkpoint))?;
            let b = builder("serve", &r)
                .seed(seed)
                .arg("port", port)
                .input(&checkpoint_file(&checkpoint))?;
            let args = ServeArgs {
                checkpoint,
                port,
                session_dir,
                async_generation,
                seed,
            };
            let studio = build_studio(&r.config, &args)?;
            let m = finish(b, Vec::new(), None)?;
            println!("{}", m.to_json());
            cmd_serve(studio, port)?;
            Ok(m)
        }
    }
}

/// Parses `argv` and runs it; used by tests that drive the binary in-process.
pub fn run_args<I, T>(argv: I) -> Result<RunManifest>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}

