use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use supernet::checkpoint;
use supernet::data::{self, Split};
use supernet::gradcheck::GradCheckError;
use supernet::network::DEFAULT_PATH_THRESHOLD;
use supernet::run::{self, BEST_CHECKPOINT};
use supernet::train::{evaluate, AblationConfig};
use supernet::{Error, RunConfig};

/// Gradient tolerance for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "supernet", version, about = "Modular capsule routing network on a synthetic VQA task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (manifest plus JSON-Lines splits).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best checkpoint plus a metrics log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated switches, e.g. `router=random` or `without=R5`.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on one split; prints JSON metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        /// Defaults to the tiny configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: Option<String>,
    },
    /// Export per-instance route traces, masks and path vectors.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATH_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<GradCheckError> for Failure {
    fn from(e: GradCheckError) -> Self {
        match e {
            GradCheckError::Objective(inner) => inner.into(),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            fallback.validate()?;
            Ok(fallback)
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn gen_data(config: Option<PathBuf>, out: PathBuf) -> Result<(), Failure> {
    let config = load_config(config.as_deref(), RunConfig::default())?;
    let dataset = data::generate_dataset(&config.task_spec())?;
    let manifest = data::write_dataset(&dataset, &out)?;
    print_json(&json!({
        "out": out.display().to_string(),
        "train": manifest.train,
        "val": manifest.val,
        "test": manifest.test,
    }));
    Ok(())
}

fn train(
    config: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    ablation: Option<String>,
) -> Result<(), Failure> {
    let mut config = load_config(config.as_deref(), RunConfig::default())?;
    if let Some(spec) = ablation {
        config.set_ablation(&AblationConfig::parse(&spec)?);
        config.validate()?;
    }
    let data_dir = data_dir
        .or_else(|| config.data_dir.clone().map(PathBuf::from))
        .ok_or_else(|| Failure::Invalid("no dataset directory: pass --data or set data_dir".into()))?;
    let out = out
        .or_else(|| config.out_dir.clone().map(PathBuf::from))
        .ok_or_else(|| Failure::Invalid("no output directory: pass --out or set out_dir".into()))?;
    let dataset = data::read_dataset(&data_dir)?;
    let outcome = run::train_to_dir(&config, &dataset, &out)?;
    let arch = config.architecture()?;
    let test = evaluate(&arch, &outcome.best, &dataset.test, &config.forward_config())?;
    print_json(&json!({
        "checkpoint": out.join(BEST_CHECKPOINT).display().to_string(),
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history.len(),
        "test": test,
    }));
    Ok(())
}

fn eval(checkpoint_path: PathBuf, data_dir: PathBuf, split: String) -> Result<(), Failure> {
    let split = Split::parse(&split)?;
    let ckpt = checkpoint::load(&checkpoint_path)?;
    let manifest = data::read_manifest(&data_dir)?;
    let config = ckpt.config().clone().with_dims(manifest.spec.dims);
    ckpt.check_against(&config.architecture()?)?;
    let instances = data::read_split(&data_dir, &manifest, split)?;
    let metrics = evaluate(&config.architecture()?, &ckpt.params, &instances, &config.forward_config())?;
    print_json(&serde_json::to_value(&metrics).expect("metrics serialize"));
    Ok(())
}

fn gradcheck(config: Option<PathBuf>, seed: u64, corrupt: Option<String>) -> Result<bool, Failure> {
    let config = load_config(config.as_deref(), RunConfig::tiny())?;
    let named = run::model_gradcheck(&config, seed, corrupt.as_deref())?;
    let mut ok = true;
    for (name, check) in named.names.iter().zip(&named.report.params) {
        let pass = check.max_rel_error <= GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "{name:<14} max_rel_error={:.3e} {}",
            check.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "overall max_rel_error={:.3e} tolerance={GRADCHECK_TOLERANCE:e} {}",
        named.report.max_rel_error(),
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn trace(checkpoint_path: PathBuf, data_dir: PathBuf, out: PathBuf, threshold: f64, split: String) -> Result<(), Failure> {
    let split = Split::parse(&split)?;
    let ckpt = checkpoint::load(&checkpoint_path)?;
    let manifest = data::read_manifest(&data_dir)?;
    let config = ckpt.config().clone().with_dims(manifest.spec.dims);
    let arch = config.architecture()?;
    ckpt.check_against(&arch)?;
    let instances = data::read_split(&data_dir, &manifest, split)?;
    run::write_traces(&arch, &ckpt.params, &instances, &config.forward_config(), threshold, &out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => gen_data(config, out),
        Command::Train {
            config,
            data,
            out,
            ablation,
        } => train(config, data, out, ablation),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(checkpoint, data, split),
        Command::Gradcheck {
            config,
            seed,
            corrupt_gradient,
        } => match gradcheck(config, seed, corrupt_gradient) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Failure::Numerical("gradient check exceeded tolerance".into())),
            Err(e) => Err(e),
        },
        Command::Trace {
            checkpoint,
            data,
            out,
            threshold,
            split,
        } => trace(checkpoint, data, out, threshold, split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
