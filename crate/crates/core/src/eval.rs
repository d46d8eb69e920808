//! Evaluation pass: deterministic forward over a dataset producing
//! per-track Pearson metrics and routing statistics for both MoE stages.

use crate::data::{batch_from_records, AssayType, Dataset};
use crate::metrics::{MetricsReport, TrackMetric};
use crate::model::Model;
use crate::objectives::predicted_rate;
use crate::routing::RoutingTrace;
use crate::tensor::{TensorError, TensorResult};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Predict each track's dataset mean instead of running the model
    /// (constant-predictor reference).
    pub baseline: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { batch_size: 4, baseline: false }
    }
}

pub struct EvalOutput {
    pub metrics: MetricsReport,
    /// Per encoder layer, gate mass per (species, expert).
    pub encoder_traces: Vec<RoutingTrace>,
    /// Per present profile type, mean combined decoder expert weights.
    pub profile_rows: Vec<(AssayType, Vec<f64>)>,
}

/// Evaluate `model` over every record of `dataset` in deterministic order
/// (eval mode: no gate noise).
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> TensorResult<EvalOutput> {
    if model.schema != dataset.schema {
        return Err(TensorError::InvalidArgument {
            op: "evaluate",
            message: "checkpoint schema disagrees with dataset schema".to_string(),
        });
    }
    if model.cfg.seq_len != dataset.seq_len || model.cfg.bin_size != dataset.bin_size {
        return Err(TensorError::InvalidArgument {
            op: "evaluate",
            message: format!(
                "model expects seq_len {} / bin_size {}, dataset has {} / {}",
                model.cfg.seq_len, model.cfg.bin_size, dataset.seq_len, dataset.bin_size
            ),
        });
    }

    let l = dataset.bins();
    let present = dataset.schema.assay_types_present();
    let mut encoder_traces = vec![
        RoutingTrace::new(dataset.schema.n_species(), model.cfg.n_experts);
        model.cfg.n_layers
    ];
    let mut profile_acc: Vec<(AssayType, Vec<f64>, f64)> =
        present.iter().map(|&a| (a, vec![0.0; model.cfg.dec_experts], 0.0)).collect();

    let mut per_track = Vec::new();
    for (m, sp) in dataset.schema.species.iter().enumerate() {
        let n = dataset.n_records(m);
        let c = sp.n_tracks();
        let mut preds = vec![Vec::with_capacity(n * l); c];
        let mut targs = vec![Vec::with_capacity(n * l); c];

        if opts.baseline {
            // Constant per-track mean predictor.
            let data = dataset.per_species[m].targets.data();
            for t in 0..c {
                let mut sum = 0.0f64;
                for r in 0..n {
                    for pos in 0..l {
                        sum += data[(r * c + t) * l + pos] as f64;
                    }
                }
                let mean = sum / (n * l) as f64;
                for r in 0..n {
                    for pos in 0..l {
                        preds[t].push(mean);
                        targs[t].push(data[(r * c + t) * l + pos] as f64);
                    }
                }
            }
        } else {
            let mut start = 0usize;
            while start < n {
                let end = (start + opts.batch_size).min(n);
                let records: Vec<usize> = (start..end).collect();
                let batch = batch_from_records::<f32>(dataset, m, &records);
                let mut tape = crate::autodiff::Tape::<f32>::new();
                let bound = model.bind(&mut tape, false);
                let pass = model.forward(&mut tape, &bound, &batch.x, m, false, None)?;
                let rate = predicted_rate(&mut tape, pass.o_final);
                let rv = tape.value(rate).data();
                let tv = batch.targets.data();
                let b = records.len();
                for bi in 0..b {
                    for t in 0..c {
                        for pos in 0..l {
                            let idx = (bi * c + t) * l + pos;
                            preds[t].push(rv[idx] as f64);
                            targs[t].push(tv[idx] as f64);
                        }
                    }
                }
                for (d, &gates) in pass.encoder_gates.iter().enumerate() {
                    encoder_traces[d].accumulate(tape.value(gates), m);
                }
                // Combined decoder weights: Σ_r ghat[b, r] · gw_r[b, k].
                for ((assay, ghat), per_group) in
                    pass.decoder_gates.group.iter().zip(pass.decoder_gates.expert.iter())
                {
                    let gh = tape.value(*ghat).data();
                    let r_count = tape.value(*ghat).dim(1);
                    let slot = profile_acc
                        .iter_mut()
                        .find(|(a, _, _)| a == assay)
                        .expect("present type");
                    for bi in 0..b {
                        for (r, &gw) in per_group.iter().enumerate() {
                            let w = tape.value(gw).data();
                            let k = tape.value(gw).dim(1);
                            let group_w = gh[bi * r_count + r] as f64;
                            for kk in 0..k {
                                slot.1[kk] += group_w * w[bi * k + kk] as f64;
                            }
                        }
                        slot.2 += 1.0;
                    }
                }
                start = end;
            }
        }

        for (t, track) in sp.tracks.iter().enumerate() {
            per_track.push(TrackMetric {
                track_id: track.id.clone(),
                assay_type: track.assay.as_str().to_string(),
                pearson: crate::metrics::pearson(&preds[t], &targs[t]),
            });
        }
    }

    let profile_rows = profile_acc
        .into_iter()
        .filter(|(_, _, count)| *count > 0.0)
        .map(|(a, sums, count)| (a, sums.iter().map(|v| v / count).collect()))
        .collect();

    Ok(EvalOutput {
        metrics: MetricsReport::from_tracks(per_track),
        encoder_traces,
        profile_rows,
    })
}
