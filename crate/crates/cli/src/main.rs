//! Command-line surface: data generation, training, evaluation, gradient
//! checking and routing-analysis export.
//!
//! Exit codes are a stable contract for CI: 0 success, 2 configuration or
//! schema validation failure, 3 I/O failure, 4 numeric abort during
//! training, 5 gradient-check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use space_core::checkpoint::{Checkpoint, CheckpointError};
use space_core::config::RunConfig;
use space_core::data::{DataError, Dataset, SynthParams};
use space_core::eval::{evaluate, EvalOptions};
use space_core::gradcheck;
use space_core::routing::{profile_routing_csv, routing_frequencies_csv};
use space_core::trainer::{train, TrainError};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "space", version, about = "Multi-species genomic profile prediction at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-motif dataset.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Generation seed (defaults to train.seed from the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path; train_log.jsonl is written alongside.
        #[arg(long)]
        out: PathBuf,
        /// Override train.alpha (MI regularization weight).
        #[arg(long)]
        alpha: Option<f64>,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: per-track / per-assay-type / overall Pearson.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write metrics.json.
        #[arg(long = "metrics-out")]
        metrics_out: PathBuf,
        /// Score a constant per-track-mean predictor instead of the model.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Finite-difference verification of every operation and the
    /// end-to-end model at f64.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export expert-selection frequencies for both MoE stages.
    Routing {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for routing_frequencies.csv and
        /// profile_routing.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) => EXIT_CONFIG,
            TrainError::Data(d) => data_code(d),
            TrainError::Tensor(_) => EXIT_NUMERIC,
            TrainError::Checkpoint(_) | TrainError::Io(_, _) => EXIT_IO,
            TrainError::NanLoss { .. } => EXIT_NUMERIC,
        };
        fail(code, e.to_string())
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Invalid(_) => EXIT_CONFIG,
        DataError::Io { .. } | DataError::Format(_) => EXIT_IO,
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        fail(data_code(&e), e.to_string())
    }
}

fn ckpt_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::ShapeMismatch { .. } | CheckpointError::Malformed(_) => EXIT_CONFIG,
        _ => EXIT_IO,
    }
}

fn init_thread_pool() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SPACE_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .map_err(|_| fail(EXIT_CONFIG, format!("SPACE_THREADS: {raw:?} is not a thread count")))?;
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| fail(EXIT_CONFIG, format!("SPACE_THREADS: {e}")))?;
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.exists() {
        return Err(fail(EXIT_IO, format!("config file {} does not exist", path.display())));
    }
    RunConfig::from_file(path).map_err(|e| fail(EXIT_CONFIG, e.to_string()))
}

fn cmd_gen_data(out: &Path, config: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let schema = cfg.validate(base).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let dataset = Dataset::generate(
        &schema,
        cfg.data.n_per_species,
        cfg.model.seq_len,
        cfg.model.bin_size,
        seed,
        &SynthParams::default(),
    )
    .map_err(Failure::from)?;
    dataset.save(out).map_err(Failure::from)?;
    let manifest = dataset.manifest();
    println!(
        "dataset written to {}: {} species, seq_len {}, bin_size {}, seed {}",
        out.display(),
        manifest.species.len(),
        manifest.seq_len,
        manifest.bin_size,
        manifest.seed
    );
    for sp in &manifest.species {
        println!("  {}: {} records x {} tracks", sp.id, sp.n_records, sp.tracks.len());
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    alpha: Option<f64>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(a) = alpha {
        cfg.train.alpha = a;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let config_schema = cfg.validate(base).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    let dataset = Dataset::load(data).map_err(Failure::from)?;
    if dataset.schema != config_schema {
        return Err(fail(
            EXIT_CONFIG,
            "data.species: config schema disagrees with the dataset manifest".to_string(),
        ));
    }
    let log_path = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.join("train_log.jsonl"))
        .unwrap_or_else(|| PathBuf::from("train_log.jsonl"));
    let outcome = train(&cfg, &dataset, out, &log_path)?;
    let last = outcome.log.last().expect("steps >= 1");
    println!(
        "trained {} steps: poisson {:.6}, total {:.6}; checkpoint {}, log {}",
        outcome.final_step,
        last.poisson,
        last.total,
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<space_core::model::Model<f32>, Failure> {
    let checkpoint = Checkpoint::load(ckpt).map_err(|e| fail(ckpt_code(&e), e.to_string()))?;
    let (model, _opt) =
        checkpoint.into_model().map_err(|e| fail(ckpt_code(&e), e.to_string()))?;
    Ok(model)
}

fn eval_failure(e: space_core::tensor::TensorError) -> Failure {
    // Evaluation precondition violations are config/schema problems.
    fail(EXIT_CONFIG, e.to_string())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    metrics_out: &Path,
    baseline: bool,
    batch_size: usize,
) -> Result<(), Failure> {
    let model = load_model(ckpt)?;
    let dataset = Dataset::load(data).map_err(Failure::from)?;
    let out = evaluate(&model, &dataset, &EvalOptions { batch_size, baseline })
        .map_err(eval_failure)?;
    let json = serde_json::to_string_pretty(&out.metrics)
        .map_err(|e| fail(EXIT_IO, format!("metrics serialization: {e}")))?;
    std::fs::write(metrics_out, json + "\n")
        .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", metrics_out.display())))?;
    match out.metrics.overall {
        Some(r) => println!("overall pearson {r:.4} -> {}", metrics_out.display()),
        None => {
            println!("overall pearson undefined (constant tracks) -> {}", metrics_out.display())
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, tol: f64) -> Result<(), Failure> {
    let reports = gradcheck::check_all(seed);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(tol);
        println!(
            "{:<18} max_rel_err {:>12.4e}  {}",
            r.name,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks within tolerance {tol:.1e}", reports.len());
        Ok(())
    } else {
        Err(fail(
            EXIT_GRADCHECK,
            format!("gradient check failed at tolerance {tol:.1e} for: {}", failed.join(", ")),
        ))
    }
}

fn cmd_routing(ckpt: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let model = load_model(ckpt)?;
    let dataset = Dataset::load(data).map_err(Failure::from)?;
    let result = evaluate(&model, &dataset, &EvalOptions::default()).map_err(eval_failure)?;
    std::fs::create_dir_all(out)
        .map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", out.display())))?;
    let species_ids: Vec<String> =
        dataset.schema.species.iter().map(|s| s.id.clone()).collect();
    let enc = routing_frequencies_csv(&result.encoder_traces, &species_ids)
        .ok_or_else(|| fail(EXIT_NUMERIC, "empty routing trace".to_string()))?;
    let enc_path = out.join("routing_frequencies.csv");
    std::fs::write(&enc_path, enc)
        .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", enc_path.display())))?;
    let prof = profile_routing_csv(&result.profile_rows)
        .ok_or_else(|| fail(EXIT_NUMERIC, "empty profile routing".to_string()))?;
    let prof_path = out.join("profile_routing.csv");
    std::fs::write(&prof_path, prof)
        .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", prof_path.display())))?;
    println!("wrote {} and {}", enc_path.display(), prof_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_thread_pool()?;
    match cli.command {
        Command::GenData { out, config, seed } => cmd_gen_data(&out, &config, seed),
        Command::Train { config, data, out, alpha, seed } => {
            cmd_train(&config, &data, &out, alpha, seed)
        }
        Command::Eval { ckpt, data, metrics_out, baseline, batch_size } => {
            cmd_eval(&ckpt, &data, &metrics_out, baseline, batch_size)
        }
        Command::Gradcheck { seed, tol } => cmd_gradcheck(seed, tol),
        Command::Routing { ckpt, data, out } => cmd_routing(&ckpt, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
