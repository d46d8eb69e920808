//! Central finite-difference verification of every backward pass.
//!
//! Each check builds a scalar loss from f64 leaf tensors twice: once
//! recording gradients, once per perturbed element to form the central
//! difference (f(x+h) − f(x−h)) / 2h with h = 1e-5. The reported figure is
//! max over elements of |analytic − fd| / max(1, |fd|).

use crate::autodiff::{NodeId, Tape};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorResult};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.max_rel_err.is_finite()
    }
}

type BuildFn<'a> = dyn Fn(&mut Tape<f64>, &[NodeId]) -> TensorResult<NodeId> + 'a;

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences over every element of every input.
pub fn finite_diff_check(inputs: &[Tensor<f64>], build: &BuildFn) -> TensorResult<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for e in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + H;
            let fp = eval(&work)?;
            work[ti].data_mut()[e] = orig - H;
            let fm = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let rel = (analytic[ti].data()[e] - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Project a tensor node to a scalar with a fixed random weighting, so the
/// check is sensitive to every output element independently.
fn project(tape: &mut Tape<f64>, node: NodeId, rng: &mut Rng) -> TensorResult<NodeId> {
    let shape = tape.value(node).shape().to_vec();
    let w = tape.constant(rand_t(&shape, -1.0, 1.0, rng));
    let prod = tape.mul(node, w)?;
    Ok(tape.sum_all(prod))
}

fn report(name: &str, r: TensorResult<f64>) -> CheckReport {
    CheckReport {
        name: name.to_string(),
        max_rel_err: r.unwrap_or(f64::INFINITY),
    }
}

macro_rules! projected_check {
    ($name:expr, $seed:expr, $inputs:expr, |$tape:ident, $ids:ident| $body:expr) => {{
        let inputs = $inputs;
        report(
            $name,
            finite_diff_check(&inputs, &|$tape: &mut Tape<f64>, $ids: &[NodeId]| {
                let out = $body?;
                let mut prng = Rng::stream($seed, "proj", 0);
                project($tape, out, &mut prng)
            }),
        )
    }};
}

pub fn check_matmul(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-matmul", 0);
    let a = rand_t(&[3, 4], -1.0, 1.0, &mut rng);
    let b = rand_t(&[4, 2], -1.0, 1.0, &mut rng);
    projected_check!("matmul", seed, vec![a, b], |tape, ids| tape.matmul(ids[0], ids[1]))
}

pub fn check_matmul_batched(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-matmul-b", 0);
    let a = rand_t(&[2, 3, 2, 4], -1.0, 1.0, &mut rng);
    let b = rand_t(&[2, 3, 4, 2], -1.0, 1.0, &mut rng);
    projected_check!("matmul_batched", seed, vec![a, b], |tape, ids| tape.matmul(ids[0], ids[1]))
}

pub fn check_conv1d(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-conv", 0);
    let x = rand_t(&[2, 3, 8], -1.0, 1.0, &mut rng);
    let w = rand_t(&[4, 3, 3], -1.0, 1.0, &mut rng);
    projected_check!("conv1d", seed, vec![x, w], |tape, ids| tape.conv1d(ids[0], ids[1], 2, 1))
}

pub fn check_maxpool(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-pool", 0);
    let x = rand_t(&[2, 3, 8], -1.0, 1.0, &mut rng);
    projected_check!("maxpool2", seed, vec![x], |tape, ids| tape.maxpool2(ids[0]))
}

pub fn check_softmax(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-softmax", 0);
    let x = rand_t(&[3, 5], -2.0, 2.0, &mut rng);
    projected_check!("softmax", seed, vec![x], |tape, ids| tape.softmax(ids[0], 1))
}

pub fn check_softmax_mid_axis(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-softmax-mid", 0);
    let x = rand_t(&[2, 4, 3], -2.0, 2.0, &mut rng);
    projected_check!("softmax_mid_axis", seed, vec![x], |tape, ids| tape.softmax(ids[0], 1))
}

pub fn check_topk_softmax(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-topk", 0);
    // Well-separated logits keep the selection stable under ±h.
    let mut x = rand_t(&[4, 6], -3.0, 3.0, &mut rng);
    for v in x.data_mut() {
        *v = (*v * 100.0).round() / 10.0;
    }
    projected_check!("topk_softmax", seed, vec![x], |tape, ids| tape.topk_softmax(ids[0], 3))
}

pub fn check_elementwise(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-elem", 0);
    let a = rand_t(&[2, 5], -1.5, 1.5, &mut rng);
    let b = rand_t(&[2, 5], 0.5, 2.0, &mut rng);
    projected_check!("elementwise", seed, vec![a, b], |tape, ids| {
        let s = tape.add(ids[0], ids[1])?;
        let m = tape.mul(s, ids[0])?;
        let d = tape.div(m, ids[1])?;
        let e = tape.exp(d);
        let sp = tape.softplus(e);
        tape.ln(sp)
    })
}

pub fn check_broadcast(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-bcast", 0);
    let a = rand_t(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = rand_t(&[3, 1], 0.5, 1.5, &mut rng);
    let c = rand_t(&[4], -1.0, 1.0, &mut rng);
    projected_check!("broadcast", seed, vec![a, b, c], |tape, ids| {
        let m = tape.mul(ids[0], ids[1])?;
        let d = tape.div(m, ids[1])?;
        tape.add(d, ids[2])
    })
}

pub fn check_gelu(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-gelu", 0);
    let x = rand_t(&[3, 7], -3.0, 3.0, &mut rng);
    projected_check!("gelu", seed, vec![x], |tape, ids| {
        Ok::<NodeId, crate::tensor::TensorError>(tape.gelu(ids[0]))
    })
}

pub fn check_layernorm(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-ln", 0);
    let x = rand_t(&[3, 6], -2.0, 2.0, &mut rng);
    let g = rand_t(&[6], 0.5, 1.5, &mut rng);
    let b = rand_t(&[6], -0.5, 0.5, &mut rng);
    projected_check!("layernorm", seed, vec![x, g, b], |tape, ids| {
        tape.layernorm(ids[0], ids[1], ids[2], 1e-5)
    })
}

pub fn check_mean_pool(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-pool-mean", 0);
    let x = rand_t(&[2, 5, 3], -1.0, 1.0, &mut rng);
    projected_check!("mean_pool", seed, vec![x], |tape, ids| tape.mean_axis(ids[0], 1))
}

pub fn check_structural(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-struct", 0);
    let a = rand_t(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = rand_t(&[2, 2, 4], -1.0, 1.0, &mut rng);
    projected_check!("structural", seed, vec![a, b], |tape, ids| {
        let p = tape.permute(ids[0], &[0, 2, 1])?;
        let r = tape.reshape(p, &[2, 4, 3])?;
        let back = tape.permute(r, &[0, 2, 1])?;
        let cat = tape.concat(back, ids[1], 1)?;
        let sel = tape.index_select(cat, 1, &[4, 0, 2, 3])?;
        tape.slice(sel, 1, 1, 2)
    })
}

pub fn check_poisson(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-poisson", 0);
    let p = rand_t(&[3, 4], 0.5, 3.0, &mut rng);
    let t = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64);
    let inputs = vec![p];
    report(
        "poisson_nll",
        finite_diff_check(&inputs, &|tape, ids| tape.poisson_nll(ids[0], &t)),
    )
}

pub fn check_mutual_information(seed: u64) -> CheckReport {
    let mut rng = Rng::stream(seed, "gc-mi", 0);
    let mut j = rand_t(&[3, 4], 0.05, 1.0, &mut rng);
    let total: f64 = j.data().iter().sum();
    for v in j.data_mut() {
        *v /= total;
    }
    let inputs = vec![j];
    report(
        "mutual_information",
        finite_diff_check(&inputs, &|tape, ids| tape.mutual_information(ids[0])),
    )
}

/// All per-operation checks. Model-level checks live alongside in
/// [`check_model_suite`]; the CLI runs both.
pub fn check_ops_suite(seed: u64) -> Vec<CheckReport> {
    vec![
        check_matmul(seed),
        check_matmul_batched(seed),
        check_conv1d(seed),
        check_maxpool(seed),
        check_softmax(seed),
        check_softmax_mid_axis(seed),
        check_topk_softmax(seed),
        check_elementwise(seed),
        check_broadcast(seed),
        check_gelu(seed),
        check_layernorm(seed),
        check_mean_pool(seed),
        check_structural(seed),
        check_poisson(seed),
        check_mutual_information(seed),
    ]
}

// ── Model-level checks ─────────────────────────────────────────────────

use crate::config::ModelConfig;
use crate::data::{one_hot, schema_from_counts, ProfileSchema};
use crate::model::{
    attention, decoder_forward, encoder_forward, BoundParams, DecoderParams, EncoderParams,
    Model, ParamSet, StemParams,
};
use crate::objectives::{predicted_rate, TraceWindow};

/// Check every parameter of a component against finite differences: the
/// parameter tensors are the harness inputs, rebound positionally.
fn component_check(
    name: &str,
    seed: u64,
    params: &ParamSet<f64>,
    build: impl Fn(&mut Tape<f64>, &BoundParams) -> TensorResult<NodeId>,
) -> CheckReport {
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, _, v)| v.clone()).collect();
    report(
        name,
        finite_diff_check(&inputs, &|tape: &mut Tape<f64>, ids: &[NodeId]| {
            let bound = BoundParams::from_nodes(ids.to_vec());
            let out = build(tape, &bound)?;
            if tape.value(out).numel() == 1 {
                return Ok(out);
            }
            let mut prng = Rng::stream(seed, "proj", 1);
            project(tape, out, &mut prng)
        }),
    )
}

/// Attention over a 2-token instance, all projection parameters checked.
pub fn check_attention(seed: u64) -> CheckReport {
    let cfg = ModelConfig { d_h: 8, n_heads: 2, n_layers: 1, bin_size: 4, seq_len: 8, ..Default::default() };
    let mut params = ParamSet::<f64>::new();
    let mut rng = Rng::stream(seed, "gc-attn", 0);
    let enc = EncoderParams::init(&cfg, 1, &mut params, &mut rng);
    let x0 = Tensor::uniform(&[1, 2, 8], -1.0, 1.0, &mut rng);
    component_check("attention", seed, &params, move |tape, bound| {
        let x = tape.constant(x0.clone());
        attention(tape, bound, &enc.layers[0], x, cfg.n_heads)
    })
}

/// The full conv stem at the acceptance scale (bin 32, five blocks).
pub fn check_stem(seed: u64) -> CheckReport {
    let cfg = ModelConfig { d_h: 16, bin_size: 32, seq_len: 256, ..Default::default() };
    let mut params = ParamSet::<f64>::new();
    let mut rng = Rng::stream(seed, "gc-stem", 0);
    let stem = StemParams::init(&cfg, &mut params, &mut rng);
    let x0 = random_one_hot(&mut rng, 1, 256);
    component_check("stem", seed, &params, move |tape, bound| {
        let x = tape.constant(x0.clone());
        stem.forward(tape, bound, x)
    })
}

/// One full encoder layer (attention + sparse MoE) for both species gates.
pub fn check_encoder(seed: u64) -> CheckReport {
    let cfg = ModelConfig {
        d_h: 8,
        n_heads: 2,
        n_layers: 2,
        n_experts: 4,
        top_k: 3,
        noise_sigma: 0.0,
        bin_size: 4,
        seq_len: 16,
        ..Default::default()
    };
    let mut params = ParamSet::<f64>::new();
    let mut rng = Rng::stream(seed, "gc-enc", 0);
    let enc = EncoderParams::init(&cfg, 2, &mut params, &mut rng);
    let h0 = Tensor::uniform(&[1, 4, 8], -1.0, 1.0, &mut rng);
    component_check("encoder", seed, &params, move |tape, bound| {
        let h = tape.constant(h0.clone());
        let out = encoder_forward(tape, bound, &enc, &cfg, h, 1, false, None)?;
        Ok(out.y)
    })
}

/// Dual-gated decoder on a two-type schema (d_q = 2 each, L = 4).
pub fn check_decoder(seed: u64) -> CheckReport {
    let cfg = ModelConfig {
        d_h: 8,
        n_heads: 2,
        dec_experts: 4,
        dec_groups: 2,
        dec_top_k: 3,
        dec_kernel: 3,
        noise_sigma: 0.0,
        bin_size: 4,
        seq_len: 16,
        ..Default::default()
    };
    let schema = schema_from_counts(&[("human", [2, 0, 0, 2])]);
    let mut params = ParamSet::<f64>::new();
    let mut rng = Rng::stream(seed, "gc-dec", 0);
    let species_emb = params.add("species_emb", Tensor::normal(&[1, 8], 0.0, 0.5, &mut rng));
    let mut dec = DecoderParams::init(&cfg, &schema, &mut params, &mut rng);
    // Zero-initialized expert output layers have exactly-zero gradients for
    // the depthwise stage at init; perturb them so the check exercises the
    // whole expert path.
    for ex in &mut dec.experts {
        *params.value_mut(ex.w2) = Tensor::uniform(&[1, 8, 1], -0.4, 0.4, &mut rng);
        *params.value_mut(ex.b2) = Tensor::uniform(&[1, 1], -0.1, 0.1, &mut rng);
    }
    let y0 = Tensor::uniform(&[1, 4, 8], -1.0, 1.0, &mut rng);
    let schema2 = schema.clone();
    component_check("decoder", seed, &params, move |tape, bound| {
        let y = tape.constant(y0.clone());
        let out = decoder_forward(
            tape, bound, &dec, &cfg, &schema2, species_emb, y, 0, false, None,
        )?;
        Ok(out.o_final)
    })
}

fn random_one_hot(rng: &mut Rng, batch: usize, seq_len: usize) -> Tensor<f64> {
    let mut x = Tensor::zeros(&[batch, 4, seq_len]);
    for b in 0..batch {
        for pos in 0..seq_len {
            let base = rng.below(4);
            x.data_mut()[(b * 4 + base) * seq_len + pos] = 1.0;
        }
    }
    x
}

fn e2e_fixture(seed: u64) -> (Model<f64>, Vec<(usize, Tensor<f64>, Tensor<f64>)>) {
    let cfg = ModelConfig {
        d_h: 16,
        n_layers: 2,
        n_heads: 2,
        n_experts: 4,
        top_k: 3,
        noise_sigma: 0.0,
        dec_experts: 4,
        dec_groups: 2,
        dec_top_k: 3,
        dec_kernel: 3,
        stem_kernel: 5,
        bin_size: 32,
        seq_len: 256,
        ..Default::default()
    };
    let schema: ProfileSchema =
        schema_from_counts(&[("human", [2, 0, 0, 1]), ("mouse", [2, 0, 0, 1])]);
    let mut model = Model::<f64>::new(cfg, schema, seed).expect("valid config");
    let mut rng = Rng::stream(seed, "gc-e2e", 0);
    // Nudge the zero-initialized decoder output layers so their upstream
    // parameters receive nonzero gradients.
    for ex in &model.decoder.experts.clone() {
        let w2 = Tensor::uniform(model.params.value(ex.w2).shape(), -0.3, 0.3, &mut rng);
        *model.params.value_mut(ex.w2) = w2;
        let b2 = Tensor::uniform(model.params.value(ex.b2).shape(), -0.1, 0.1, &mut rng);
        *model.params.value_mut(ex.b2) = b2;
    }
    let batches = (0..2)
        .map(|m| {
            let bases = ['A', 'C', 'G', 'T'];
            let seq: String = (0..256).map(|_| bases[rng.below(4)]).collect();
            let x3 = one_hot::<f64>(&seq).expect("clean alphabet");
            let x = x3.reshaped(&[1, 4, 256]).expect("same count");
            let targets = Tensor::from_fn(&[1, 3, 8], |_| rng.below(5) as f64);
            (m, x, targets)
        })
        .collect();
    (model, batches)
}

fn e2e_loss(
    model: &Model<f64>,
    tape: &mut Tape<f64>,
    bound: &BoundParams,
    batches: &[(usize, Tensor<f64>, Tensor<f64>)],
    alpha: f64,
) -> TensorResult<NodeId> {
    let mut window = TraceWindow::new(model.cfg.n_layers, model.schema.n_species(), model.cfg.n_experts);
    let mut poisson_terms = Vec::new();
    for (species, x, targets) in batches {
        let x_id = tape.constant(x.clone());
        let h = model.stem.forward(tape, bound, x_id)?;
        let enc = encoder_forward(
            tape, bound, &model.encoder, &model.cfg, h, *species, false, None,
        )?;
        let dec = decoder_forward(
            tape,
            bound,
            &model.decoder,
            &model.cfg,
            &model.schema,
            model.encoder.species_emb,
            enc.y,
            *species,
            false,
            None,
        )?;
        let rate = predicted_rate(tape, dec.o_final);
        poisson_terms.push(tape.poisson_nll(rate, targets)?);
        for (d, &g) in enc.gate_weights.iter().enumerate() {
            window.add(tape, d, *species, g)?;
        }
    }
    let mut poisson = poisson_terms[0];
    for &t in &poisson_terms[1..] {
        poisson = tape.add(poisson, t)?;
    }
    let poisson_mean = tape.mul_scalar(poisson, 1.0 / batches.len() as f64);
    let mi_nodes = window.mi_nodes(tape)?;
    let mut mi_sum = mi_nodes[0];
    for &n in &mi_nodes[1..] {
        mi_sum = tape.add(mi_sum, n)?;
    }
    let neg = tape.mul_scalar(mi_sum, -alpha);
    tape.add(poisson_mean, neg)
}

/// End-to-end: stem + species-aware MoE encoder + dual-gated decoder +
/// composite objective, every parameter against central differences.
pub fn check_end_to_end(seed: u64) -> CheckReport {
    let (model, batches) = e2e_fixture(seed);
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, _, v)| v.clone()).collect();
    report(
        "end_to_end",
        finite_diff_check(&inputs, &|tape: &mut Tape<f64>, ids: &[NodeId]| {
            let bound = BoundParams::from_nodes(ids.to_vec());
            e2e_loss(&model, tape, &bound, &batches, 0.01)
        }),
    )
}

pub fn check_model_suite(seed: u64) -> Vec<CheckReport> {
    vec![
        check_attention(seed),
        check_stem(seed),
        check_encoder(seed),
        check_decoder(seed),
        check_end_to_end(seed),
    ]
}

/// Everything `cmd_gradcheck` runs: per-op checks plus model-level checks.
pub fn check_all(seed: u64) -> Vec<CheckReport> {
    let mut out = check_ops_suite(seed);
    out.extend(check_model_suite(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_within_tolerance() {
        for r in check_ops_suite(17) {
            assert!(
                r.passed(DEFAULT_TOLERANCE),
                "{} failed gradcheck: {}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn harness_is_tight_on_polynomials() {
        let x = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let err = finite_diff_check(&[x], &|tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-9, "central differences on x^2 should be near-exact: {err}");
    }

    #[test]
    fn harness_flags_a_broken_gradient() {
        // gelu's derivative is not the identity; pretending the op were
        // linear (by differentiating x instead of gelu(x) in the value
        // path) must produce a visible mismatch. Emulated by comparing the
        // analytic gradient of sum(gelu(x)) against the fd slope of
        // sum(x): rel err must be far above tolerance.
        let x = Tensor::<f64>::new(vec![3], vec![-2.0, 0.3, 1.7]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let y = tape.gelu(id);
        let s = tape.sum_all(y);
        let mut grads = tape.backward(s).unwrap();
        let analytic = grads.take(id).unwrap();
        // fd of sum(x) is exactly 1 per element; gelu'(-2) is nowhere near 1.
        let rel: f64 = (analytic.data()[0] - 1.0).abs();
        assert!(rel > 0.9, "negative control too weak: {rel}");
    }
}
