//! Profile-grouped enhancement decoder.
//!
//! A per-species linear head produces the base prediction [B, C_m, L];
//! tracks are permuted into assay-type blocks, each block is enhanced by a
//! dual-gated mixture of K track-count-agnostic convolutional experts
//! (group weights from species + pooled sequence context, expert weights
//! from the block's own prediction pattern), and the recomposed
//! enhancement is added back onto the base prediction. Expert output
//! layers are zero-initialized, so at initialization the decoder is
//! exactly the base head.

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::data::{AssayType, ProfileSchema};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

use super::params::{BoundParams, ParamId, ParamSet};

/// Hidden channels inside each decoder expert's depthwise/pointwise pair.
const EXPERT_CHANNELS: usize = 8;

#[derive(Debug, Clone)]
pub struct DecExpert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct GroupGate {
    pub species_w: ParamId,
    pub species_b: ParamId,
    pub seq_w: ParamId,
    pub seq_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Per-species base head d_h → C_m.
    pub heads: Vec<(ParamId, ParamId)>,
    /// Per present profile type.
    pub group_gates: Vec<GroupGate>,
    /// Per (profile type, group): expert selector over pooled prediction
    /// features, L → K.
    pub expert_gates: Vec<Vec<(ParamId, ParamId)>>,
    /// K shared experts.
    pub experts: Vec<DecExpert>,
}

impl DecoderParams {
    pub fn init<T: Scalar>(
        cfg: &ModelConfig,
        schema: &ProfileSchema,
        params: &mut ParamSet<T>,
        rng: &mut Rng,
    ) -> DecoderParams {
        let d = cfg.d_h;
        let l = cfg.bins();
        let heads = schema
            .species
            .iter()
            .map(|sp| {
                let c = sp.n_tracks();
                let bound = (3.0 / d as f64).sqrt();
                let w = params.add(
                    format!("dec.head.{}.w", sp.id),
                    Tensor::uniform(&[d, c], -bound, bound, rng),
                );
                let b = params.add(format!("dec.head.{}.b", sp.id), Tensor::zeros(&[c]));
                (w, b)
            })
            .collect();
        let present = schema.assay_types_present();
        let group_gates = present
            .iter()
            .map(|a| {
                let bound = (3.0 / d as f64).sqrt();
                let tag = a.as_str().to_lowercase();
                GroupGate {
                    species_w: params.add(
                        format!("dec.group.{tag}.species.w"),
                        Tensor::uniform(&[d, cfg.dec_groups], -bound, bound, rng),
                    ),
                    species_b: params
                        .add(format!("dec.group.{tag}.species.b"), Tensor::zeros(&[cfg.dec_groups])),
                    seq_w: params.add(
                        format!("dec.group.{tag}.seq.w"),
                        Tensor::uniform(&[d, cfg.dec_groups], -bound, bound, rng),
                    ),
                    seq_b: params
                        .add(format!("dec.group.{tag}.seq.b"), Tensor::zeros(&[cfg.dec_groups])),
                }
            })
            .collect();
        let expert_gates = present
            .iter()
            .map(|a| {
                let tag = a.as_str().to_lowercase();
                (0..cfg.dec_groups)
                    .map(|r| {
                        let bound = (3.0 / l as f64).sqrt();
                        let w = params.add(
                            format!("dec.sel.{tag}.group{r}.w"),
                            Tensor::uniform(&[l, cfg.dec_experts], -bound, bound, rng),
                        );
                        let b = params.add(
                            format!("dec.sel.{tag}.group{r}.b"),
                            Tensor::zeros(&[cfg.dec_experts]),
                        );
                        (w, b)
                    })
                    .collect()
            })
            .collect();
        let experts = (0..cfg.dec_experts)
            .map(|k| {
                let kw = cfg.dec_kernel;
                let bound = (6.0 / kw as f64).sqrt();
                DecExpert {
                    w1: params.add(
                        format!("dec.expert{k}.w1"),
                        Tensor::uniform(&[EXPERT_CHANNELS, 1, kw], -bound, bound, rng),
                    ),
                    b1: params.add(format!("dec.expert{k}.b1"), Tensor::zeros(&[EXPERT_CHANNELS, 1])),
                    // Zero init: enhancement starts exactly at zero.
                    w2: params.add(
                        format!("dec.expert{k}.w2"),
                        Tensor::zeros(&[1, EXPERT_CHANNELS, 1]),
                    ),
                    b2: params.add(format!("dec.expert{k}.b2"), Tensor::zeros(&[1, 1])),
                }
            })
            .collect();
        DecoderParams { heads, group_gates, expert_gates, experts }
    }
}

/// Apply one shared expert to a type block [B, d_q, L]: tracks are folded
/// into the batch so the same parameters serve any d_q.
fn apply_expert<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    ex: &DecExpert,
    block: NodeId,
    kernel: usize,
) -> TensorResult<NodeId> {
    let shape = tape.value(block).shape().to_vec();
    let (b, d_q, l) = (shape[0], shape[1], shape[2]);
    let folded = tape.reshape(block, &[b * d_q, 1, l])?;
    let c1 = tape.conv1d(folded, bound.node(ex.w1), 1, (kernel - 1) / 2)?;
    let c1b = tape.add(c1, bound.node(ex.b1))?;
    let act = tape.gelu(c1b);
    let c2 = tape.conv1d(act, bound.node(ex.w2), 1, 0)?;
    let c2b = tape.add(c2, bound.node(ex.b2))?;
    tape.reshape(c2b, &[b, d_q, l])
}

/// Group weights for profile type `q`: softmax(species_linear(e) +
/// seq_linear(mean-pool(y))) — [B, R].
fn group_gate<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    gate: &GroupGate,
    species_vec: NodeId, // [1, d]
    pooled: NodeId,      // [B, d]
) -> TensorResult<NodeId> {
    let sp = tape.linear(species_vec, bound.node(gate.species_w), bound.node(gate.species_b))?;
    let sq = tape.linear(pooled, bound.node(gate.seq_w), bound.node(gate.seq_b))?;
    let logits = tape.add(sq, sp)?; // [B, R] + broadcast [1, R]
    tape.softmax(logits, 1)
}

/// Expert weights for (type q, group r): pool the block over tracks,
/// project L → K, noisy top-k. Returns [B, K].
#[allow(clippy::too_many_arguments)]
fn expert_gate<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    sel: (ParamId, ParamId),
    block_feats: NodeId, // [B, L] (track-mean of the block)
    cfg: &ModelConfig,
    train_mode: bool,
    noise: &mut Option<&mut Rng>,
) -> TensorResult<NodeId> {
    let mut logits = tape.linear(block_feats, bound.node(sel.0), bound.node(sel.1))?;
    if train_mode && cfg.noise_sigma > 0.0 {
        if let Some(rng) = noise {
            let b = tape.value(logits).dim(0);
            let n = Tensor::normal(&[b, cfg.dec_experts], 0.0, cfg.noise_sigma, rng);
            let nc = tape.constant(n);
            logits = tape.add(logits, nc)?;
        }
    }
    tape.topk_softmax(logits, cfg.dec_top_k)
}

/// Gate records for routing analysis: values are read off the tape after
/// the forward pass.
pub struct DecoderGates {
    /// Per present type: (assay, group weights [B, R]).
    pub group: Vec<(AssayType, NodeId)>,
    /// Per present type per group: expert weights [B, K].
    pub expert: Vec<Vec<NodeId>>,
}

pub struct DecoderOutput {
    /// [B, C_m, L]: base + recomposed enhancement (rate activation is the
    /// objective module's concern).
    pub o_final: NodeId,
    /// [B, C_m, L] base head alone.
    pub o_base: NodeId,
    pub gates: DecoderGates,
}

/// Full decoder pass for one species batch.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    dec: &DecoderParams,
    cfg: &ModelConfig,
    schema: &ProfileSchema,
    species_emb: ParamId,
    y: NodeId, // [B, L, d]
    species: usize,
    train_mode: bool,
    mut noise: Option<&mut Rng>,
) -> TensorResult<DecoderOutput> {
    if species >= schema.n_species() {
        return Err(TensorError::InvalidArgument {
            op: "decoder_forward",
            message: format!("unknown species index {species}"),
        });
    }
    let shape = tape.value(y).shape().to_vec();
    let (b, l, _d) = (shape[0], shape[1], shape[2]);
    let (hw, hb) = dec.heads[species];
    let proj = tape.linear(y, bound.node(hw), bound.node(hb))?; // [B, L, C]
    let o_base = tape.permute(proj, &[0, 2, 1])?; // [B, C, L]

    let species_vec = tape.index_select(bound.node(species_emb), 0, &[species])?; // [1, d]
    let pooled = tape.mean_axis(y, 1)?; // [B, d]

    let phi = schema.phi(species);
    let psi = schema.psi(species);
    let ordered = tape.index_select(o_base, 1, &phi)?;

    let mut group_records = Vec::new();
    let mut expert_records = Vec::new();
    let mut blocks: Vec<NodeId> = Vec::new();
    let mut offset = 0usize;
    for (qi, (assay, d_q)) in schema.group_sizes(species).into_iter().enumerate() {
        if d_q == 0 {
            continue;
        }
        let block = tape.slice(ordered, 1, offset, d_q)?; // [B, d_q, L]
        offset += d_q;

        let ghat = group_gate(tape, bound, &dec.group_gates[qi], species_vec, pooled)?;
        group_records.push((assay, ghat));

        // Expert outputs are evaluated once per (type, expert) and reused
        // across groups.
        let expert_outs: Vec<NodeId> = dec
            .experts
            .iter()
            .map(|ex| apply_expert(tape, bound, ex, block, cfg.dec_kernel))
            .collect::<TensorResult<_>>()?;

        let feats = tape.mean_axis(block, 1)?; // [B, L]
        let mut per_group_gates = Vec::new();
        let mut enhanced: Option<NodeId> = None;
        for r in 0..cfg.dec_groups {
            let gw = expert_gate(
                tape,
                bound,
                dec.expert_gates[qi][r],
                feats,
                cfg,
                train_mode,
                &mut noise,
            )?; // [B, K]
            per_group_gates.push(gw);

            let mut mix: Option<NodeId> = None;
            for (k, &ex_out) in expert_outs.iter().enumerate() {
                let wk = tape.slice(gw, 1, k, 1)?; // [B, 1]
                let wk3 = tape.reshape(wk, &[b, 1, 1])?;
                let scaled = tape.mul(ex_out, wk3)?;
                mix = Some(match mix {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
            let wr = tape.slice(ghat, 1, r, 1)?; // [B, 1]
            let wr3 = tape.reshape(wr, &[b, 1, 1])?;
            let weighted = tape.mul(mix.expect("dec_experts >= 1"), wr3)?;
            enhanced = Some(match enhanced {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        expert_records.push(per_group_gates);
        blocks.push(enhanced.expect("dec_groups >= 1"));
    }

    let mut cat: Option<NodeId> = None;
    for blk in blocks {
        cat = Some(match cat {
            None => blk,
            Some(acc) => tape.concat(acc, blk, 1)?,
        });
    }
    let enhanced_ordered = cat.expect("at least one nonempty type block");
    let o_enhanced = tape.index_select(enhanced_ordered, 1, &psi)?;
    let o_final = tape.add(o_base, o_enhanced)?;
    let _ = l;
    Ok(DecoderOutput {
        o_final,
        o_base,
        gates: DecoderGates { group: group_records, expert: expert_records },
    })
}
