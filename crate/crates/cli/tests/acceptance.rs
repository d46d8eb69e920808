//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`). The training-based criteria share one
//! study of six desk-scale runs (3 seeds x {regularized, unregularized})
//! computed once.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use space_core::autodiff::Tape;
use space_core::checkpoint::{Checkpoint, CheckpointError};
use space_core::config::{DataConfig, ModelConfig, RunConfig, SpeciesSpec, TrainConfig};
use space_core::data::{schema_from_counts, Dataset, SynthParams};
use space_core::eval::{evaluate, EvalOptions};
use space_core::metrics::{mcc_binary, mcc_multiclass, ConfusionMatrix};
use space_core::model::{decoder_forward, DecoderParams, Model, ParamSet};
use space_core::objectives::{mutual_information, JointDistribution};
use space_core::optim::lr_at;
use space_core::rng::Rng;
use space_core::routing::routing_frequencies_csv;
use space_core::tensor::Tensor;
use space_core::trainer::{train, LogRecord, TrainOutcome};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_space")
}

fn unique_dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!(
        "space-accept-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos()
    ));
    std::fs::create_dir_all(&d).unwrap();
    d
}

// ── Shared training study (criteria 7, 8, 9) ───────────────────────────

const STUDY_SEEDS: [u64; 3] = [101, 102, 103];

struct StudyRun {
    log: Vec<LogRecord>,
    max_postclip_norm: f64,
    ckpt: PathBuf,
    wall: std::time::Duration,
}

struct Study {
    dataset: Dataset,
    dir: PathBuf,
    /// (seed, regularized) → run.
    runs: Vec<((u64, bool), StudyRun)>,
}

impl Study {
    fn run(&self, seed: u64, regularized: bool) -> &StudyRun {
        &self.runs.iter().find(|(k, _)| *k == (seed, regularized)).expect("study run").1
    }
}

fn desk_config(seed: u64, alpha: f64) -> RunConfig {
    RunConfig {
        model: ModelConfig::default(), // d_h 64, D 2, heads 4, N 4/k 3, K 8/R 2/k_dec 3, 2048/128
        data: DataConfig {
            n_per_species: 256,
            schema_path: None,
            species: ["human", "mouse"]
                .into_iter()
                .map(|id| SpeciesSpec {
                    id: id.to_string(),
                    dnase_atac: 2,
                    tf_chip: 2,
                    histone_chip: 2,
                    cage: 2,
                })
                .collect(),
        },
        train: TrainConfig { steps: 2000, warmup_steps: 200, alpha, seed, ..Default::default() },
    }
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let dir = unique_dir("study");
        let schema = schema_from_counts(&[("human", [2, 2, 2, 2]), ("mouse", [2, 2, 2, 2])]);
        let dataset =
            Dataset::generate(&schema, 256, 2048, 128, 424_242, &SynthParams::default()).unwrap();
        let jobs: Vec<(u64, bool)> = STUDY_SEEDS
            .iter()
            .flat_map(|&s| [(s, true), (s, false)])
            .collect();
        let runs: Vec<((u64, bool), StudyRun)> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|&(seed, regularized)| {
                    let dataset = &dataset;
                    let dir = dir.clone();
                    scope.spawn(move || {
                        let alpha = if regularized { 0.01 } else { 0.0 };
                        let cfg = desk_config(seed, alpha);
                        let tag = format!("s{seed}-a{}", if regularized { "01" } else { "0" });
                        let ckpt = dir.join(format!("{tag}.ckpt"));
                        let log = dir.join(format!("{tag}.jsonl"));
                        let t0 = std::time::Instant::now();
                        let outcome: TrainOutcome = train(&cfg, dataset, &ckpt, &log).unwrap();
                        (
                            (seed, regularized),
                            StudyRun {
                                log: outcome.log,
                                max_postclip_norm: outcome.max_postclip_norm,
                                ckpt,
                                wall: t0.elapsed(),
                            },
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        Study { dataset, dir, runs }
    })
}

// ── Criterion 1: gradient correctness via cmd_gradcheck ────────────────

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = std::time::Instant::now();
    let out = Command::new(bin()).arg("gradcheck").output().unwrap();
    let elapsed = t0.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "gradcheck failed:\n{stdout}");
    let op_lines = stdout.lines().filter(|l| l.contains("max_rel_err")).count();
    assert!(op_lines >= 20, "expected one line per checked op, got {op_lines}");
    assert!(
        stdout.lines().filter(|l| l.contains("max_rel_err")).all(|l| l.ends_with("ok")),
        "some checks failed:\n{stdout}"
    );
    assert!(stdout.contains("end_to_end"), "end-to-end model must be checked");
    assert!(
        elapsed.as_secs() <= 120,
        "gradcheck took {elapsed:?}, budget is 2 minutes on one core"
    );

    // Tolerance floor: at 1e-12 float truncation must surface as exit 5.
    let strict = Command::new(bin()).args(["gradcheck", "--tol", "1e-12"]).output().unwrap();
    assert_eq!(strict.status.code(), Some(5), "tol 1e-12 must exit 5");
    println!("CRITERION 1 PASS: gradcheck ok in {elapsed:?} ({op_lines} checks), strict tol exits 5");
}

// ── Criterion 2: MI oracle equivalence ─────────────────────────────────

#[test]
fn criterion_02_mi_oracle_equivalence() {
    let mut rng = Rng::new(20_02);
    let entropy = |masses: &[f64]| -> f64 {
        masses.iter().map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 }).sum()
    };
    for case in 0..1000 {
        let m = 2 + rng.below(3);
        let n = 2 + rng.below(3);
        let mut p: Vec<f64> = (0..m * n).map(|_| rng.next_f64() + 1e-6).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let joint = JointDistribution::new(m, n, p.clone()).unwrap();
        let mi = mutual_information(&joint);
        let ps = joint.species_marginal();
        let pe = joint.expert_marginal();
        let direct: f64 = (0..m)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| {
                let v = joint.mass(a, b);
                if v > 0.0 { v * (v / (ps[a] * pe[b])).ln() } else { 0.0 }
            })
            .sum();
        assert!(
            (mi - direct).abs() <= 1e-10,
            "case {case}: entropy decomposition {mi} vs direct oracle {direct}"
        );
        assert!(mi >= -1e-12, "case {case}: MI must be nonnegative, got {mi}");
        assert!(
            mi <= entropy(&ps).min(entropy(&pe)) + 1e-9,
            "case {case}: MI exceeds min marginal entropy"
        );
    }
    // Product distributions: MI vanishes.
    for _ in 0..1000 {
        let m = 2 + rng.below(3);
        let n = 2 + rng.below(3);
        let mut ps: Vec<f64> = (0..m).map(|_| rng.next_f64() + 0.02).collect();
        let mut pe: Vec<f64> = (0..n).map(|_| rng.next_f64() + 0.02).collect();
        let st: f64 = ps.iter().sum();
        let et: f64 = pe.iter().sum();
        ps.iter_mut().for_each(|v| *v /= st);
        pe.iter_mut().for_each(|v| *v /= et);
        let p: Vec<f64> =
            (0..m).flat_map(|a| (0..n).map(|b| ps[a] * pe[b]).collect::<Vec<_>>()).collect();
        let joint = JointDistribution::new(m, n, p).unwrap();
        assert!(mutual_information(&joint).abs() <= 1e-9);
    }
    println!("CRITERION 2 PASS: MI matches the direct-sum oracle on 1000 joints + 1000 products");
}

// ── Criterion 3: Poisson loss exactness and gradient ───────────────────

#[test]
fn criterion_03_poisson_loss() {
    let mut tape = Tape::<f64>::new();
    let p1 = tape.constant(Tensor::scalar(1.0));
    let l1 = tape.poisson_nll(p1, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(tape.value(l1).item().unwrap(), 1.0, "p=1, t=1 must be exactly 1.0");

    let p2 = tape.constant(Tensor::scalar(2.0));
    let l2 = tape.poisson_nll(p2, &Tensor::scalar(3.0)).unwrap();
    let expected = 2.0 - 3.0 * 2.0f64.ln();
    assert!((tape.value(l2).item().unwrap() - expected).abs() <= 1e-12);

    // Autodiff gradient vs the closed form (1 − t/p)/N.
    let mut rng = Rng::new(3003);
    for _ in 0..200 {
        let n = 1 + rng.below(12);
        let p0 = Tensor::<f64>::from_fn(&[n], |_| rng.uniform(0.2, 4.0));
        let t0 = Tensor::<f64>::from_fn(&[n], |_| rng.below(6) as f64);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(p0.clone());
        let loss = tape.poisson_nll(p, &t0).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(p).unwrap();
        for i in 0..n {
            let analytic = (1.0 - t0.data()[i] / p0.data()[i]) / n as f64;
            assert!(
                (g.data()[i] - analytic).abs() <= 1e-10,
                "autodiff {} vs analytic {analytic}",
                g.data()[i]
            );
        }
    }
    println!("CRITERION 3 PASS: Poisson values exact, gradient matches (1 - t/p)/N to 1e-10");
}

// ── Criterion 4: MCC oracle equivalence ────────────────────────────────

#[test]
fn criterion_04_mcc_oracle_equivalence() {
    let mut rng = Rng::new(4004);
    for case in 0..1000 {
        let counts: Vec<f64> = (0..4).map(|_| rng.below(40) as f64).collect();
        let c = ConfusionMatrix::from_counts(2, counts.clone());
        // Class 1 as positive: TP=C[1][1], TN=C[0][0], FP=C[0][1], FN=C[1][0].
        let binary = mcc_binary(counts[3], counts[0], counts[1], counts[2]);
        let multi = mcc_multiclass(&c);
        assert!((binary - multi).abs() <= 1e-12, "case {case}: {binary} vs {multi} {counts:?}");
    }
    assert_eq!(mcc_binary(7.0, 9.0, 0.0, 0.0), 1.0);
    assert_eq!(mcc_binary(0.0, 0.0, 4.0, 6.0), -1.0);
    let perfect = ConfusionMatrix::from_counts(2, vec![5.0, 0.0, 0.0, 7.0]);
    assert_eq!(mcc_multiclass(&perfect), 1.0);
    let anti = ConfusionMatrix::from_counts(2, vec![0.0, 5.0, 7.0, 0.0]);
    assert_eq!(mcc_multiclass(&anti), -1.0);
    let uniform = ConfusionMatrix::from_counts(2, vec![3.0; 4]);
    assert_eq!(mcc_multiclass(&uniform), 0.0);
    println!("CRITERION 4 PASS: multiclass MCC equals the binary formula on 1000 matrices");
}

// ── Criterion 5: routing invariants ────────────────────────────────────

#[test]
fn criterion_05_routing_invariants() {
    let mut rng = Rng::new(5005);
    for case in 0..10_000 {
        let n = 2 + rng.below(7);
        let k = 1 + rng.below(n);
        let logits = Tensor::<f64>::from_fn(&[n], |_| rng.uniform(-6.0, 6.0));
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(logits.clone());
        let y = tape.topk_softmax(a, k).unwrap();
        let v = tape.value(y).data();
        let nz = v.iter().filter(|&&x| x != 0.0).count();
        let sum: f64 = v.iter().sum();
        assert_eq!(nz, k, "case {case}: expected exactly {k} nonzeros, got {nz}");
        assert!((sum - 1.0).abs() <= 1e-6, "case {case}: sum {sum}");
        assert!(v.iter().all(|&x| x >= 0.0));

        let full = tape.topk_softmax(a, n).unwrap();
        let soft = tape.softmax(a, 0).unwrap();
        for (x, y) in tape.value(full).data().iter().zip(tape.value(soft).data().iter()) {
            assert!((x - y).abs() <= 1e-12, "case {case}: k=n must equal softmax");
        }
    }

    // Identical experts make the MoE output gate-invariant.
    let cfg = ModelConfig {
        d_h: 16,
        n_layers: 1,
        n_heads: 2,
        n_experts: 4,
        top_k: 3,
        noise_sigma: 0.0,
        bin_size: 16,
        seq_len: 64,
        ..Default::default()
    };
    let schema = schema_from_counts(&[("human", [1, 0, 0, 0]), ("mouse", [1, 0, 0, 0])]);
    let mut model = Model::<f64>::new(cfg, schema, 50).unwrap();
    let layer = model.encoder.layers[0].clone();
    let e0 = layer.experts[0].clone();
    for e in &layer.experts[1..] {
        for (src, dst) in [(e0.w1, e.w1), (e0.b1, e.b1), (e0.w2, e.w2), (e0.b2, e.b2)] {
            let v = model.params.value(src).clone();
            *model.params.value_mut(dst) = v;
        }
    }
    let mut rng2 = Rng::new(51);
    let x = {
        let mut x = Tensor::<f64>::zeros(&[2, 4, 64]);
        for b in 0..2 {
            for pos in 0..64 {
                let base = rng2.below(4);
                x.data_mut()[(b * 4 + base) * 64 + pos] = 1.0;
            }
        }
        x
    };
    let run = |model: &Model<f64>, species: usize| {
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape, false);
        let pass = model.forward(&mut tape, &bound, &x, species, false, None).unwrap();
        tape.value(pass.o_final).clone()
    };
    // The two species share every parameter except the gate head (and the
    // species embedding feeds only token 0 and the decoder group gate);
    // neutralize those so the only difference left is the gate.
    let emb0: Vec<f64> =
        model.params.value(model.encoder.species_emb).data()[..16].to_vec();
    {
        let emb = model.params.value_mut(model.encoder.species_emb);
        let d = emb.shape()[1];
        let row0 = emb.data()[..d].to_vec();
        emb.data_mut()[d..].copy_from_slice(&row0);
    }
    let (hw0, hb0) = model.decoder.heads[0];
    let (hw1, hb1) = model.decoder.heads[1];
    for (src, dst) in [(hw0, hw1), (hb0, hb1)] {
        let v = model.params.value(src).clone();
        *model.params.value_mut(dst) = v;
    }
    let y0 = run(&model, 0);
    let y1 = run(&model, 1);
    let denom = y0.data().iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-12);
    for (a, b) in y0.data().iter().zip(y1.data().iter()) {
        assert!(
            (a - b).abs() / denom <= 1e-6,
            "identical experts must make routing irrelevant: {a} vs {b}"
        );
    }
    let _ = emb0;
    println!("CRITERION 5 PASS: top-k invariants over 10k lanes; identical-expert invariance");
}

// ── Criterion 6: residual identity and permutation round-trip ──────────

#[test]
fn criterion_06_residual_identity() {
    for (counts, q) in [([3usize, 0, 0, 0], 1), ([2, 0, 0, 2], 2), ([1, 2, 1, 2], 4)] {
        let cfg = ModelConfig {
            d_h: 16,
            dec_experts: 4,
            dec_groups: 2,
            dec_top_k: 3,
            dec_kernel: 3,
            noise_sigma: 0.0,
            bin_size: 16,
            seq_len: 128,
            ..Default::default()
        };
        let schema = schema_from_counts(&[("human", counts), ("mouse", counts)]);
        assert_eq!(schema.n_profile_types(), q);
        let mut params = ParamSet::<f32>::new();
        let mut rng = Rng::new(60 + q as u64);
        let emb = params.add("emb", Tensor::normal(&[2, 16], 0.0, 0.02, &mut rng));
        let dec = DecoderParams::init(&cfg, &schema, &mut params, &mut rng);
        for species in 0..2 {
            let y0 = Tensor::<f32>::uniform(&[2, 8, 16], -2.0, 2.0, &mut rng);
            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape, false);
            let y = tape.constant(y0);
            let out = decoder_forward(
                &mut tape, &bound, &dec, &cfg, &schema, emb, y, species, false, None,
            )
            .unwrap();
            let fin = tape.value(out.o_final).data();
            let base = tape.value(out.o_base).data();
            for (a, b) in fin.iter().zip(base.iter()) {
                assert!(
                    ((a - b) as f64).abs() <= 1e-12,
                    "Q={q}: zero-init enhancement must leave o_base untouched"
                );
            }
        }
        // Permutation round-trip.
        for m in 0..2 {
            let phi = schema.phi(m);
            let psi = schema.psi(m);
            let c = schema.species[m].n_tracks();
            let v: Vec<usize> = (0..c).rev().collect();
            let gathered: Vec<usize> = phi.iter().map(|&i| v[i]).collect();
            let restored: Vec<usize> = psi.iter().map(|&i| gathered[i]).collect();
            assert_eq!(restored, v, "psi(phi(v)) must be the identity");
        }
    }
    println!("CRITERION 6 PASS: exact residual identity and permutation round-trip for Q in {{1,2,4}}");
}

// ── Criterion 7: overfit convergence on the desk config ────────────────

#[test]
fn criterion_07_overfit_convergence() {
    let study = study();
    let run = study.run(STUDY_SEEDS[0], true);
    let first = run.log.first().unwrap().poisson;
    let last = run.log.last().unwrap().poisson;
    assert!(
        last <= 0.5 * first,
        "poisson at step 2000 ({last:.4}) must be at most half of step 0 ({first:.4})"
    );
    let ckpt = Checkpoint::load(&run.ckpt).unwrap();
    let (model, _) = ckpt.into_model().unwrap();
    let out = evaluate(&model, &study.dataset, &EvalOptions::default()).unwrap();
    let overall = out.metrics.overall.expect("trained model has non-constant predictions");
    assert!(overall >= 0.8, "train-split mean per-track pearson {overall:.4} must reach 0.8");
    println!(
        "CRITERION 7 PASS: poisson {first:.3} -> {last:.3}, train pearson {overall:.4}, wall {:?}",
        run.wall
    );
}

// ── Criterion 8: MI regularization effect ──────────────────────────────

fn tail_mean_final_layer_mi(log: &[LogRecord]) -> f64 {
    let tail = &log[log.len().saturating_sub(100)..];
    tail.iter().map(|r| *r.mi.last().unwrap()).sum::<f64>() / tail.len() as f64
}

#[test]
fn criterion_08_mi_effect() {
    let study = study();
    let mut mi_wins = 0;
    let mut routing_wins = 0;
    for &seed in &STUDY_SEEDS {
        let reg = study.run(seed, true);
        let base = study.run(seed, false);
        let mi_reg = tail_mean_final_layer_mi(&reg.log);
        let mi_base = tail_mean_final_layer_mi(&base.log);
        if mi_reg > mi_base {
            mi_wins += 1;
        }
        // Routing divergence from the exported CSV of the regularized run.
        let ckpt = Checkpoint::load(&reg.ckpt).unwrap();
        let (model, _) = ckpt.into_model().unwrap();
        let out = evaluate(&model, &study.dataset, &EvalOptions::default()).unwrap();
        let ids: Vec<String> =
            study.dataset.schema.species.iter().map(|s| s.id.clone()).collect();
        let csv = routing_frequencies_csv(&out.encoder_traces, &ids).unwrap();
        let final_layer = model.cfg.n_layers - 1;
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{final_layer},")))
            .map(|l| l.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 2, "one row per species in the final layer");
        let max_gap = (0..rows[0].len())
            .map(|n| (rows[0][n] - rows[1][n]).abs())
            .fold(0.0f64, f64::max);
        println!(
            "  seed {seed}: MI reg {mi_reg:.4} vs baseline {mi_base:.4}; max |F_human - F_mouse| {max_gap:.3}"
        );
        if max_gap > 0.2 {
            routing_wins += 1;
        }
    }
    assert!(mi_wins >= 2, "regularized MI must exceed baseline in >= 2 of 3 seeds ({mi_wins})");
    assert!(
        routing_wins >= 2,
        "routing_frequencies.csv must show an expert with |F_human - F_mouse| > 0.2 in >= 2 of 3 regularized runs ({routing_wins})"
    );
    println!("CRITERION 8 PASS: MI ordering {mi_wins}/3 seeds, routing divergence {routing_wins}/3");
}

// ── Criterion 9: schedule and clipping ─────────────────────────────────

#[test]
fn criterion_09_schedule_and_clipping() {
    let tc = TrainConfig::default(); // peak 5e-4, warmup 200, steps 2000, clip 0.2
    assert_eq!(lr_at(0, &tc), 0.0, "lr must ramp from 0");
    assert!((lr_at(tc.warmup_steps, &tc) - tc.peak_lr).abs() <= 1e-18);
    assert!(lr_at(tc.steps, &tc).abs() <= 1e-12);
    // Continuity at the warmup boundary: approach from the left.
    let left_limit = lr_at(tc.warmup_steps - 1, &tc) + tc.peak_lr / tc.warmup_steps as f64;
    assert!((left_limit - lr_at(tc.warmup_steps, &tc)).abs() <= 1e-12);

    let study = study();
    for ((seed, reg), run) in &study.runs {
        assert!(
            run.max_postclip_norm <= 0.2 + 1e-7,
            "seed {seed} reg {reg}: post-clip norm {} exceeds 0.2",
            run.max_postclip_norm
        );
    }
    println!("CRITERION 9 PASS: schedule endpoints/continuity; post-clip norms <= 0.2 + 1e-7");
}

// ── Criterion 10: determinism and persistence ──────────────────────────

fn small_run_config_toml() -> String {
    r#"
[model]
d_h = 16
n_layers = 2
n_heads = 2
n_experts = 4
top_k = 3
dec_experts = 4
dec_groups = 2
dec_top_k = 2
dec_kernel = 3
bin_size = 32
seq_len = 256

[data]
n_per_species = 12

[[data.species]]
id = "human"
dnase_atac = 1
cage = 1

[[data.species]]
id = "mouse"
dnase_atac = 1
cage = 1

[train]
steps = 40
warmup_steps = 8
batch_size = 2
accum_batches = 2
eval_every = 20
seed = 33
"#
    .to_string()
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let dir = unique_dir("det");
    let cfg_path = dir.join("run.toml");
    std::fs::write(&cfg_path, small_run_config_toml()).unwrap();
    let ds_dir = dir.join("ds");
    let status = Command::new(bin())
        .args(["gen-data", "--out"])
        .arg(&ds_dir)
        .arg("--config")
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert!(status.success());

    // Same-seed reruns: bitwise identical logs and checkpoints.
    let mut logs = Vec::new();
    let mut ckpts = Vec::new();
    for tag in ["a", "b"] {
        let sub = dir.join(tag);
        std::fs::create_dir_all(&sub).unwrap();
        let ckpt = sub.join("model.ckpt");
        let status = Command::new(bin())
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(&ds_dir)
            .arg("--out")
            .arg(&ckpt)
            .status()
            .unwrap();
        assert!(status.success());
        logs.push(std::fs::read(sub.join("train_log.jsonl")).unwrap());
        ckpts.push(std::fs::read(&ckpt).unwrap());
    }
    assert_eq!(logs[0], logs[1], "same-seed reruns must produce identical train_log.jsonl");
    assert_eq!(ckpts[0], ckpts[1], "same-seed reruns must produce identical checkpoints");

    // save -> load -> eval must be bitwise identical to pre-save eval.
    let ckpt_path = dir.join("a").join("model.ckpt");
    let dataset = Dataset::load(&ds_dir).unwrap();
    let loaded = Checkpoint::load(&ckpt_path).unwrap();
    let (model, _) = loaded.into_model().unwrap();
    let resaved = dir.join("resaved.ckpt");
    Checkpoint::load(&ckpt_path).unwrap().save(&resaved).unwrap();
    assert_eq!(
        std::fs::read(&ckpt_path).unwrap(),
        std::fs::read(&resaved).unwrap(),
        "save -> load -> save must be byte-identical"
    );
    let eval1 = evaluate(&model, &dataset, &EvalOptions::default()).unwrap();
    let (model2, _) = Checkpoint::load(&resaved).unwrap().into_model().unwrap();
    let eval2 = evaluate(&model2, &dataset, &EvalOptions::default()).unwrap();
    let j1 = serde_json::to_string(&eval1.metrics).unwrap();
    let j2 = serde_json::to_string(&eval2.metrics).unwrap();
    assert_eq!(j1, j2, "eval after checkpoint round-trip must be bitwise identical");

    // Corruptions: distinct errors per failure mode.
    let bytes = std::fs::read(&ckpt_path).unwrap();
    let magic = dir.join("bad-magic.ckpt");
    let mut b = bytes.clone();
    b[0] = b'Z';
    std::fs::write(&magic, &b).unwrap();
    assert!(matches!(Checkpoint::load(&magic), Err(CheckpointError::BadMagic)));

    let vers = dir.join("bad-version.ckpt");
    let mut b = bytes.clone();
    b[4] = b[4].wrapping_add(1);
    std::fs::write(&vers, &b).unwrap();
    assert!(matches!(
        Checkpoint::load(&vers),
        Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
    ));

    let trunc = dir.join("truncated.ckpt");
    std::fs::write(&trunc, &bytes[..bytes.len() - 17]).unwrap();
    assert!(matches!(Checkpoint::load(&trunc), Err(CheckpointError::Truncated)));

    std::fs::remove_dir_all(&dir).ok();
    println!("CRITERION 10 PASS: bitwise determinism, checkpoint round-trip, distinct corruption errors");
}

// Keep the study directory alive until the process exits so parallel
// criteria can read the checkpoints; it lives under the OS temp dir.
#[test]
fn zz_study_summary() {
    let study = study();
    for ((seed, reg), run) in &study.runs {
        println!(
            "study run seed {seed} alpha {}: final poisson {:.4}, final total {:.4}, wall {:?}",
            if *reg { "0.01" } else { "0" },
            run.log.last().unwrap().poisson,
            run.log.last().unwrap().total,
            run.wall
        );
    }
    println!("study artifacts in {}", study.dir.display());
}
