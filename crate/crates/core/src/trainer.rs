//! Optimization loop: species-alternating accumulation windows, AdamW with
//! warmup/cosine scheduling and global-norm clipping, JSON-lines logging,
//! periodic checkpoints and a hard abort on non-finite loss.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::config::{ConfigError, RunConfig};
use crate::data::{BatchMode, BatchStream, DataError, Dataset};
use crate::model::Model;
use crate::objectives::{predicted_rate, LossReport, TraceWindow};
use crate::optim::{clip_global_norm, lr_at, AdamW};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug)]
pub enum TrainError {
    Config(ConfigError),
    Data(DataError),
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Io(PathBuf, std::io::Error),
    /// Loss became NaN/Inf; the last good checkpoint is retained at the
    /// configured output path.
    NanLoss { step: usize },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Io(p, e) => write!(f, "io error at {}: {e}", p.display()),
            TrainError::NanLoss { step } => {
                write!(f, "non-finite loss at step {step}; aborted with last good checkpoint")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}
impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}
impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}
impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

/// Initialize each base-head bias so softplus(bias) matches the track's
/// mean target count: training starts at the marginal-rate predictor
/// instead of burning steps on global scale.
fn init_head_biases(model: &mut Model<f32>, dataset: &Dataset) {
    let l = dataset.bins();
    for (m, sp) in dataset.schema.species.iter().enumerate() {
        let c = sp.n_tracks();
        let n = dataset.n_records(m);
        let data = dataset.per_species[m].targets.data();
        let (_, bias_id) = model.decoder.heads[m];
        let bias = model.params.value_mut(bias_id);
        for t in 0..c {
            let mut sum = 0.0f64;
            for r in 0..n {
                for pos in 0..l {
                    sum += data[(r * c + t) * l + pos] as f64;
                }
            }
            let mean = (sum / (n * l) as f64).max(1e-3);
            // softplus^-1(mean) = ln(e^mean − 1)
            let inv = if mean > 20.0 { mean } else { (mean.exp() - 1.0).ln() };
            bias.data_mut()[t] = inv as f32;
        }
    }
}

/// One line of train_log.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub poisson: f64,
    pub mi: Vec<f64>,
    pub total: f64,
    pub grad_norm_preclip: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    /// Max observed post-clip global gradient norm across all steps.
    pub max_postclip_norm: f64,
    pub final_step: usize,
    pub model: Model<f32>,
}

/// Train a fresh model on `dataset` per `cfg`, writing `out_ckpt` and
/// `log_path`. Deterministic in `cfg.train.seed`: reruns produce
/// bit-identical logs and checkpoints.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_ckpt: &Path,
    log_path: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.model.validate()?;
    let schema = dataset.schema.clone();
    cfg.train.validate(schema.n_species())?;
    if dataset.seq_len != cfg.model.seq_len || dataset.bin_size != cfg.model.bin_size {
        return Err(TrainError::Config(ConfigError(format!(
            "model.seq_len/bin_size ({}, {}) disagree with dataset ({}, {})",
            cfg.model.seq_len, cfg.model.bin_size, dataset.seq_len, dataset.bin_size
        ))));
    }

    let tc = &cfg.train;
    let seed = tc.seed;
    let mut model = Model::<f32>::new(cfg.model.clone(), schema.clone(), seed)?;
    init_head_biases(&mut model, dataset);
    let mut opt = AdamW::new(&model.params, tc);
    let mode = BatchMode::parse(&tc.batch_mode).expect("validated");
    let mut stream = BatchStream::new(dataset, tc.batch_size, mode, seed)?;
    let mut noise = Rng::stream(seed, "gate-noise", 0);

    let meta = CheckpointMeta { config: cfg.clone(), schema: schema.clone() };
    let mut log_file = std::io::BufWriter::new(
        std::fs::File::create(log_path).map_err(|e| TrainError::Io(log_path.to_path_buf(), e))?,
    );
    let mut log = Vec::with_capacity(tc.steps);
    let mut max_postclip = 0.0f64;

    let n_layers = cfg.model.n_layers;
    let n_species = schema.n_species();
    let n_experts = cfg.model.n_experts;

    for step in 0..tc.steps {
        let lr = lr_at(step, tc);
        let mut tape = crate::autodiff::Tape::<f32>::new();
        let bound = model.bind(&mut tape, true);
        let mut window = TraceWindow::new(n_layers, n_species, n_experts);
        let mut poisson_terms = Vec::with_capacity(tc.accum_batches);
        for _ in 0..tc.accum_batches {
            let batch = stream.next_batch::<f32>();
            let pass =
                model.forward(&mut tape, &bound, &batch.x, batch.species, true, Some(&mut noise))?;
            let rate = predicted_rate(&mut tape, pass.o_final);
            let nll = tape.poisson_nll(rate, &batch.targets)?;
            poisson_terms.push(nll);
            for (d, &gates) in pass.encoder_gates.iter().enumerate() {
                window.add(&mut tape, d, batch.species, gates)?;
            }
        }
        let mut poisson_sum = poisson_terms[0];
        for &t in &poisson_terms[1..] {
            poisson_sum = tape.add(poisson_sum, t)?;
        }
        let poisson_mean = tape.mul_scalar(poisson_sum, 1.0 / tc.accum_batches as f64);
        let mi_nodes = window.mi_nodes(&mut tape)?;
        let mut mi_sum = mi_nodes[0];
        for &n in &mi_nodes[1..] {
            mi_sum = tape.add(mi_sum, n)?;
        }
        let neg = tape.mul_scalar(mi_sum, -tc.alpha);
        let total_node = tape.add(poisson_mean, neg)?;

        let poisson_val = tape.value(poisson_mean).item()? as f64;
        let mi_vals: Vec<f64> =
            mi_nodes.iter().map(|&n| tape.value(n).item().map(|v| v as f64)).collect::<Result<_, _>>()?;
        let report = LossReport::compose(poisson_val, mi_vals, tc.alpha);
        let total_tape_val = tape.value(total_node).item()? as f64;
        if !total_tape_val.is_finite()
            || !report.poisson.is_finite()
            || report.mi_per_layer.iter().any(|v| !v.is_finite())
        {
            // Current parameters predate this window's update: retain them.
            Checkpoint::capture(meta.clone(), &model, &opt, step as u64, vec![noise.state()])
                .save(out_ckpt)?;
            log_file.flush().map_err(|e| TrainError::Io(log_path.to_path_buf(), e))?;
            return Err(TrainError::NanLoss { step });
        }

        let mut grads = tape.backward(total_node)?;
        let mut grad_list: Vec<Tensor<f32>> = model
            .params
            .iter()
            .map(|(id, _, value)| {
                grads.take(bound.node(id)).unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect();
        let (preclip, _scale) = clip_global_norm(&mut grad_list, tc.clip_norm);
        let postclip = {
            let refs: Vec<&Tensor<f32>> = grad_list.iter().collect();
            crate::tensor::global_norm(&refs)
        };
        max_postclip = max_postclip.max(postclip);
        opt.step(&mut model.params, &grad_list, lr);

        let record = LogRecord {
            step,
            lr,
            poisson: report.poisson,
            mi: report.mi_per_layer.clone(),
            total: report.total,
            grad_norm_preclip: preclip,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| TrainError::Io(log_path.to_path_buf(), std::io::Error::other(e)))?;
        log_file
            .write_all(line.as_bytes())
            .and_then(|_| log_file.write_all(b"\n"))
            .map_err(|e| TrainError::Io(log_path.to_path_buf(), e))?;
        log.push(record);

        if (step + 1) % tc.eval_every == 0 && step + 1 < tc.steps {
            Checkpoint::capture(meta.clone(), &model, &opt, (step + 1) as u64, vec![noise.state()])
                .save(out_ckpt)?;
        }
    }

    Checkpoint::capture(meta.clone(), &model, &opt, tc.steps as u64, vec![noise.state()])
        .save(out_ckpt)?;
    log_file.flush().map_err(|e| TrainError::Io(log_path.to_path_buf(), e))?;
    Ok(TrainOutcome { log, max_postclip_norm: max_postclip, final_step: tc.steps, model })
}
