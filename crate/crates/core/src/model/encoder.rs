//! Species-aware transformer encoder with a sparse cross-species MoE in
//! place of the FFN.
//!
//! The species embedding is prepended as an extra token, learned absolute
//! positional embeddings cover the L+1 positions, and each layer is a
//! pre-layernorm residual block: attention, then the MoE whose gate head
//! is selected by the batch's species. Gate weights of every token are
//! returned per layer so the caller can accumulate routing statistics.

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

use super::params::{BoundParams, ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct ExpertFfn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    /// One gate head per species.
    pub gates: Vec<(ParamId, ParamId)>,
    pub experts: Vec<ExpertFfn>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    /// [L+1, d_h] learned absolute positions (slot 0 is the species token).
    pub pos_emb: ParamId,
    /// [M, d_h] trainable species embeddings.
    pub species_emb: ParamId,
}

/// LeCun-uniform linear init (unit-gain layers).
fn linear_init<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut Rng,
) -> (ParamId, ParamId) {
    let bound = (3.0 / rows as f64).sqrt();
    let w = params.add(format!("{name}.w"), Tensor::uniform(&[rows, cols], -bound, bound, rng));
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[cols]));
    (w, b)
}

/// He-uniform init for layers feeding a GELU.
fn gelu_linear_init<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut Rng,
) -> (ParamId, ParamId) {
    let bound = (6.0 / rows as f64).sqrt();
    let w = params.add(format!("{name}.w"), Tensor::uniform(&[rows, cols], -bound, bound, rng));
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[cols]));
    (w, b)
}

impl EncoderParams {
    pub fn init<T: Scalar>(
        cfg: &ModelConfig,
        n_species: usize,
        params: &mut ParamSet<T>,
        rng: &mut Rng,
    ) -> EncoderParams {
        let d = cfg.d_h;
        let pos_emb = params.add(
            "enc.pos_emb",
            Tensor::normal(&[cfg.bins() + 1, d], 0.0, 0.02, rng),
        );
        let species_emb =
            params.add("enc.species_emb", Tensor::normal(&[n_species, d], 0.0, 0.02, rng));
        let layers = (0..cfg.n_layers)
            .map(|li| {
                let p = |s: &str| format!("enc.layer{li}.{s}");
                let ln1_g = params.add(p("ln1.g"), Tensor::full(&[d], T::ONE));
                let ln1_b = params.add(p("ln1.b"), Tensor::zeros(&[d]));
                let (wq, bq) = linear_init(params, &p("attn.q"), d, d, rng);
                let (wk, bk) = linear_init(params, &p("attn.k"), d, d, rng);
                let (wv, bv) = linear_init(params, &p("attn.v"), d, d, rng);
                let (wo, bo) = linear_init(params, &p("attn.o"), d, d, rng);
                let ln2_g = params.add(p("ln2.g"), Tensor::full(&[d], T::ONE));
                let ln2_b = params.add(p("ln2.b"), Tensor::zeros(&[d]));
                let gates = (0..n_species)
                    .map(|m| linear_init(params, &p(&format!("gate{m}")), d, cfg.n_experts, rng))
                    .collect();
                let experts = (0..cfg.n_experts)
                    .map(|n| {
                        let (w1, b1) =
                            gelu_linear_init(params, &p(&format!("expert{n}.fc1")), d, 2 * d, rng);
                        let (w2, b2) =
                            linear_init(params, &p(&format!("expert{n}.fc2")), 2 * d, d, rng);
                        ExpertFfn { w1, b1, w2, b2 }
                    })
                    .collect();
                EncoderLayer {
                    ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, gates, experts,
                }
            })
            .collect();
        EncoderParams { layers, pos_emb, species_emb }
    }
}

/// Standard scaled dot-product multi-head self-attention over [B, T, d].
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &EncoderLayer,
    x: NodeId,
    n_heads: usize,
) -> TensorResult<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if d % n_heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            message: format!("d_h {d} not divisible by n_heads {n_heads}"),
        });
    }
    let hd = d / n_heads;
    let project = |tape: &mut Tape<T>, w, bia| -> TensorResult<NodeId> {
        let p = tape.linear(x, bound.node(w), bound.node(bia))?;
        let r = tape.reshape(p, &[b, t, n_heads, hd])?;
        tape.permute(r, &[0, 2, 1, 3]) // [B, H, T, hd]
    };
    let q = project(tape, layer.wq, layer.bq)?;
    let k = project(tape, layer.wk, layer.bk)?;
    let v = project(tape, layer.wv, layer.bv)?;
    let k_t = tape.permute(k, &[0, 1, 3, 2])?; // [B, H, hd, T]
    let scores = tape.matmul(q, k_t)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (hd as f64).sqrt());
    let attn = tape.softmax(scaled, 3)?;
    let ctx = tape.matmul(attn, v)?; // [B, H, T, hd]
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, &[b, t, d])?;
    tape.linear(flat, bound.node(layer.wo), bound.node(layer.bo))
}

/// Per-token sparse MoE: species gate head → noisy top-k weights → convex
/// combination of expert FFNs. Returns (output, gate weights [B, T, N]).
#[allow(clippy::too_many_arguments)]
fn moe<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &EncoderLayer,
    cfg: &ModelConfig,
    x: NodeId,
    species: usize,
    train_mode: bool,
    noise: &mut Option<&mut Rng>,
) -> TensorResult<(NodeId, NodeId)> {
    let shape = tape.value(x).shape().to_vec();
    let (b, t, _d) = (shape[0], shape[1], shape[2]);
    let (gw, gb) = layer.gates[species];
    let mut logits = tape.linear(x, bound.node(gw), bound.node(gb))?;
    if train_mode && cfg.noise_sigma > 0.0 {
        if let Some(rng) = noise {
            let n = Tensor::normal(&[b, t, cfg.n_experts], 0.0, cfg.noise_sigma, rng);
            let nc = tape.constant(n);
            logits = tape.add(logits, nc)?;
        }
    }
    let gates = tape.topk_softmax(logits, cfg.top_k)?;
    let mut combined: Option<NodeId> = None;
    for (n, ex) in layer.experts.iter().enumerate() {
        let h1 = tape.linear(x, bound.node(ex.w1), bound.node(ex.b1))?;
        let a1 = tape.gelu(h1);
        let h2 = tape.linear(a1, bound.node(ex.w2), bound.node(ex.b2))?;
        let w_n = tape.slice(gates, 2, n, 1)?; // [B, T, 1]
        let scaled = tape.mul(h2, w_n)?;
        combined = Some(match combined {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    Ok((combined.expect("n_experts >= 1"), gates))
}

pub struct EncoderOutput {
    /// [B, L, d_h]; the species token is excluded.
    pub y: NodeId,
    /// Per layer: gate weights [B, L+1, N] over all routed tokens.
    pub gate_weights: Vec<NodeId>,
}

/// Full encoder: prepend species token, add positions, run D pre-LN
/// residual blocks, drop the species position.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    enc: &EncoderParams,
    cfg: &ModelConfig,
    h: NodeId,
    species: usize,
    train_mode: bool,
    mut noise: Option<&mut Rng>,
) -> TensorResult<EncoderOutput> {
    let shape = tape.value(h).shape().to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let n_species = tape.value(bound.node(enc.species_emb)).dim(0);
    if species >= n_species {
        return Err(TensorError::InvalidArgument {
            op: "encoder_forward",
            message: format!("species index {species} out of range ({n_species} species)"),
        });
    }
    let row = tape.index_select(bound.node(enc.species_emb), 0, &[species])?;
    let row3 = tape.reshape(row, &[1, 1, d])?;
    let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
    let tok = tape.add(zeros, row3)?; // broadcast copy across the batch
    let mut x = tape.concat(tok, h, 1)?; // [B, L+1, d]
    x = tape.add(x, bound.node(enc.pos_emb))?;

    let mut gate_weights = Vec::with_capacity(enc.layers.len());
    for layer in &enc.layers {
        let norm1 = tape.layernorm(x, bound.node(layer.ln1_g), bound.node(layer.ln1_b), 1e-5)?;
        let att = attention(tape, bound, layer, norm1, cfg.n_heads)?;
        x = tape.add(x, att)?;
        let norm2 = tape.layernorm(x, bound.node(layer.ln2_g), bound.node(layer.ln2_b), 1e-5)?;
        let (moe_out, gates) =
            moe(tape, bound, layer, cfg, norm2, species, train_mode, &mut noise)?;
        x = tape.add(x, moe_out)?;
        gate_weights.push(gates);
    }
    let y = tape.slice(x, 1, 1, l)?;
    Ok(EncoderOutput { y, gate_weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_h: 16,
            n_layers: 2,
            n_heads: 4,
            n_experts: 4,
            top_k: 3,
            noise_sigma: 0.0,
            bin_size: 32,
            seq_len: 256,
            ..Default::default()
        }
    }

    fn build(seed: u64) -> (ModelConfig, ParamSet<f64>, EncoderParams) {
        let cfg = tiny_cfg();
        let mut params = ParamSet::new();
        let mut rng = Rng::stream(seed, "enc-test", 0);
        let enc = EncoderParams::init(&cfg, 2, &mut params, &mut rng);
        (cfg, params, enc)
    }

    fn random_h(rng: &mut Rng, b: usize, l: usize, d: usize) -> Tensor<f64> {
        Tensor::uniform(&[b, l, d], -1.0, 1.0, rng)
    }

    #[test]
    fn output_drops_species_token() {
        let (cfg, params, enc) = build(1);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let mut rng = Rng::new(5);
        let h = tape.constant(random_h(&mut rng, 3, 8, 16));
        let out = encoder_forward(&mut tape, &bound, &enc, &cfg, h, 0, false, None).unwrap();
        assert_eq!(tape.value(out.y).shape(), &[3, 8, 16]);
        assert_eq!(out.gate_weights.len(), 2);
        assert_eq!(tape.value(out.gate_weights[0]).shape(), &[3, 9, 4]);
    }

    #[test]
    fn invalid_species_rejected() {
        let (cfg, params, enc) = build(2);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let h = tape.constant(Tensor::zeros(&[1, 8, 16]));
        assert!(encoder_forward(&mut tape, &bound, &enc, &cfg, h, 7, false, None).is_err());
    }

    #[test]
    fn gate_rows_sum_to_one_with_at_most_k_nonzero() {
        let (cfg, params, enc) = build(3);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let mut rng = Rng::new(6);
        let h = tape.constant(random_h(&mut rng, 2, 8, 16));
        let out = encoder_forward(&mut tape, &bound, &enc, &cfg, h, 1, false, None).unwrap();
        for &g in &out.gate_weights {
            for lane in tape.value(g).data().chunks(4) {
                let sum: f64 = lane.iter().sum();
                let nz = lane.iter().filter(|&&v| v != 0.0).count();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(nz <= 3 && nz >= 1);
                assert!(lane.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn identical_experts_make_output_gate_invariant() {
        // With every expert equal, y = Σ w_k E(x) = E(x) regardless of the
        // gate head; compare species-0 routing against species-1 routing.
        let (cfg, mut params, enc) = build(4);
        // Copy expert 0's parameters into experts 1..N.
        for layer in &enc.layers {
            let e0 = layer.experts[0].clone();
            for e in &layer.experts[1..] {
                for (src, dst) in [(e0.w1, e.w1), (e0.b1, e.b1), (e0.w2, e.w2), (e0.b2, e.b2)] {
                    let v = params.value(src).clone();
                    *params.value_mut(dst) = v;
                }
            }
        }
        let mut rng = Rng::new(44);
        // The two species gate heads have independent random weights, so
        // they stand in for "two different random gates" on the same input.
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(random_h(&mut rng, 2, 5, 16));
        let (y0, _) = super::moe(&mut tape, &bound, &enc.layers[0], &cfg, x, 0, false, &mut None)
            .unwrap();
        let (y1, _) = super::moe(&mut tape, &bound, &enc.layers[0], &cfg, x, 1, false, &mut None)
            .unwrap();
        let a = tape.value(y0).data();
        let b = tape.value(y1).data();
        let denom: f64 = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() / denom <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn full_selection_equals_dense_mixture() {
        let (mut cfg, params, enc) = build(5);
        cfg.top_k = cfg.n_experts;
        let mut rng = Rng::new(8);
        let x0 = random_h(&mut rng, 1, 4, 16);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(x0);
        let (y, gates) =
            super::moe(&mut tape, &bound, &enc.layers[0], &cfg, x, 0, false, &mut None).unwrap();
        // Dense reference: softmax(logits) ⊙ expert outputs, computed by hand.
        let soft = {
            let (gw, gb) = enc.layers[0].gates[0];
            let logits = tape.linear(x, bound.node(gw), bound.node(gb)).unwrap();
            tape.softmax(logits, 2).unwrap()
        };
        let gv = tape.value(gates).data();
        let sv = tape.value(soft).data();
        for (a, b) in gv.iter().zip(sv.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let _ = y;
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let (cfg, params, enc) = build(6);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let mut rng = Rng::new(3);
        let x = tape.constant(random_h(&mut rng, 2, 1, 16));
        let layer = &enc.layers[0];
        let att = attention(&mut tape, &bound, layer, x, cfg.n_heads).unwrap();
        // Reference: v = x Wv + bv, out = v Wo + bo (softmax over one key = 1).
        let v = tape.linear(x, bound.node(layer.wv), bound.node(layer.bv)).unwrap();
        let reference = tape.linear(v, bound.node(layer.wo), bound.node(layer.bo)).unwrap();
        for (a, b) in tape.value(att).data().iter().zip(tape.value(reference).data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_noise_changes_logits_deterministically() {
        let (mut cfg, params, enc) = build(7);
        cfg.noise_sigma = 0.01;
        let mut rng = Rng::new(2);
        let x0 = random_h(&mut rng, 1, 4, 16);
        let run = |seed: u64| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape, false);
            let x = tape.constant(x0.clone());
            let mut noise = Rng::stream(seed, "noise", 0);
            let (_, gates) = super::moe(
                &mut tape,
                &bound,
                &enc.layers[0],
                &cfg,
                x,
                0,
                true,
                &mut Some(&mut noise),
            )
            .unwrap();
            tape.value(gates).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
