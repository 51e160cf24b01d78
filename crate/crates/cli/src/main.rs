use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mrtnet_core::checkpoint::Checkpoint;
use mrtnet_core::config::Config;
use mrtnet_core::data::SynthSpec;
use mrtnet_core::gradsuite::gradient_suite;
use mrtnet_core::train::{cmd_eval, cmd_predict, cmd_synth, cmd_train, CHECKPOINT_FILE};
use mrtnet_core::{ErrorClass, MrtError};

#[derive(Parser)]
#[command(name = "mrtnet", version, about = "Video sentence grounding with a multi-resolution temporal network")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train(Overrides),
    /// Evaluate a checkpoint and write text and JSON reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print the JSON report on stdout.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Ground one query in one feature file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Video length in seconds.
        #[arg(long)]
        duration: f64,
        /// Query tokens, e.g. `--query person opens door`.
        #[arg(long, num_args = 1.., required = true)]
        query: Vec<String>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic corpus (train/test splits plus feature files).
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    val_annotations: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_model: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Three comma-separated weights, coarse to fine.
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    ssim_window: Option<usize>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_query_len: Option<usize>,
    #[arg(long)]
    d_q: Option<usize>,
    #[arg(long)]
    no_ssim: bool,
    #[arg(long)]
    no_iou: bool,
    /// Boundary cross-entropy only (all map weights zero).
    #[arg(long)]
    ce_only: bool,
    /// Any other `key=value` setting.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    /// `base`, then the config file, then flags.
    fn resolve(&self, base: Config) -> Result<Config> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut pairs: Vec<(String, String)> = Vec::new();
        macro_rules! flag {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    pairs.push((stringify!($field).to_string(), v.to_string()));
                }
            )*};
        }
        flag!(seed, d, n_model, kernel_size, num_heads, lr, batch_size, epochs, alphas, ssim_window, c1, c2);
        flag!(early_stop_patience, dropout, max_query_len, d_q);
        for (key, path) in [
            ("out_dir", &self.out),
            ("annotations", &self.annotations),
            ("val_annotations", &self.val_annotations),
            ("features_dir", &self.features_dir),
            ("embeddings", &self.embeddings),
        ] {
            if let Some(p) = path {
                pairs.push((key.into(), p.display().to_string()));
            }
        }
        for (key, on) in [("no_ssim", self.no_ssim), ("no_iou", self.no_iou), ("ce_only", self.ce_only)] {
            if on {
                pairs.push((key.into(), "true".into()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            pairs.push((k.into(), v.into()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    num_samples: usize,
    #[arg(long, default_value_t = 128)]
    test_samples: usize,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    d_v: usize,
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0.1)]
    min_span_frac: f64,
    #[arg(long, default_value_t = 0.4)]
    max_span_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 1.0)]
    signal_scale: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Eval and predict start from the configuration stored in the checkpoint.
fn checkpoint_config(path: &Path) -> Result<Config> {
    Ok(Checkpoint::load(path)?.config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => {
            let cfg = o.resolve(Config::default())?;
            let outcome = cmd_train(&cfg)?;
            let ck = &outcome.checkpoint;
            match &cfg.out_dir {
                Some(dir) => println!(
                    "best mIoU {:.2} at epoch {}; checkpoint {}",
                    ck.best_metric,
                    ck.epoch,
                    dir.join(CHECKPOINT_FILE).display()
                ),
                None => println!(
                    "best mIoU {:.2} at epoch {} (no --out, nothing written)",
                    ck.best_metric, ck.epoch
                ),
            }
        }
        Command::Eval {
            checkpoint,
            json,
            overrides,
        } => {
            let cfg = overrides.resolve(checkpoint_config(&checkpoint)?)?;
            let outcome = cmd_eval(&cfg, &checkpoint)?;
            if json {
                print!("{}", outcome.report.to_json()?);
            } else {
                print!("{}", outcome.report.to_text());
            }
        }
        Command::Predict {
            checkpoint,
            features,
            duration,
            query,
            json,
            overrides,
        } => {
            let cfg = overrides.resolve(checkpoint_config(&checkpoint)?)?;
            let tokens: Vec<String> = query
                .iter()
                .flat_map(|q| q.split_whitespace())
                .map(str::to_lowercase)
                .collect();
            let p = cmd_predict(&cfg, &checkpoint, &features, &tokens, duration)?;
            if json {
                println!("{}", serde_json::to_string(&p)?);
            } else {
                println!("start_sec {:.3}\nend_sec   {:.3}\nprob      {:.6}", p.start, p.end, p.prob);
            }
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                num_samples: a.num_samples,
                n: a.n,
                d_v: a.d_v,
                d_q: 300,
                vocab_size: a.vocab_size,
                min_span_frac: a.min_span_frac,
                max_span_frac: a.max_span_frac,
                noise_std: a.noise_std,
                signal_scale: a.signal_scale,
                seed: a.seed,
            };
            cmd_synth(&spec, a.test_samples, &a.out)?;
            println!(
                "wrote {} train and {} test samples to {}",
                a.num_samples,
                a.test_samples,
                a.out.display()
            );
        }
        Command::Gradcheck { step, tol } => {
            let entries = gradient_suite(step, tol)?;
            let mut failed = Vec::new();
            for e in &entries {
                let (name, offset) = e.check.worst.clone().unwrap_or_default();
                println!(
                    "{:<18} {:>6} coords  max rel err {:.3e}  at {name}[{offset}]  {}",
                    e.name,
                    e.check.coords_checked,
                    e.check.max_rel_error,
                    if e.check.passed() { "ok" } else { "FAIL" }
                );
                if !e.check.passed() {
                    failed.push(e.name);
                }
            }
            if !failed.is_empty() {
                return Err(MrtError::Numerical(format!("gradient check failed for {failed:?}")).into());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<MrtError>().map(MrtError::class) {
        Some(ErrorClass::Io) => 2,
        Some(ErrorClass::Numerical) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
