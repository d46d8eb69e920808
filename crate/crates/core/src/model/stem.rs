//! CNN stem: compress one-hot nucleotides to bin-resolution hidden states.
//!
//! Each block halves the length (conv with same padding, GELU, max-pool
//! stride 2); bin_size = 2^n_blocks. Channel widths ramp geometrically
//! from 32 up to d_h across blocks.

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorResult};

use super::params::{BoundParams, ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone)]
pub struct StemParams {
    pub blocks: Vec<ConvBlock>,
    pub kernel: usize,
}

/// Channel width of each block output: geometric ramp 32 → d_h.
pub fn channel_ramp(d_h: usize, n_blocks: usize) -> Vec<usize> {
    const START: f64 = 32.0;
    (1..=n_blocks)
        .map(|i| {
            if n_blocks == 1 {
                d_h
            } else {
                let t = (i - 1) as f64 / (n_blocks - 1) as f64;
                let c = START * (d_h as f64 / START).powf(t);
                c.round() as usize
            }
        })
        .collect()
}

impl StemParams {
    pub fn init<T: Scalar>(
        cfg: &ModelConfig,
        params: &mut ParamSet<T>,
        rng: &mut Rng,
    ) -> StemParams {
        let n_blocks = cfg.n_conv_blocks();
        let widths = channel_ramp(cfg.d_h, n_blocks);
        let k = cfg.stem_kernel;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut c_in = 4usize;
        for (i, &c_out) in widths.iter().enumerate() {
            // He-uniform: each block feeds a GELU, which halves small
            // signals; gain-2 init keeps activation variance near 1 so
            // input information survives the full tower.
            let bound = (6.0 / (c_in * k) as f64).sqrt();
            let w = params.add(
                format!("stem.block{i}.w"),
                Tensor::uniform(&[c_out, c_in, k], -bound, bound, rng),
            );
            let b = params.add(format!("stem.block{i}.b"), Tensor::zeros(&[c_out, 1]));
            blocks.push(ConvBlock { w, b, c_in, c_out });
            c_in = c_out;
        }
        StemParams { blocks, kernel: k }
    }

    /// x: [B, 4, seq_len] → [B, L, d_h] with L = seq_len / bin_size.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: NodeId,
    ) -> TensorResult<NodeId> {
        let pad = (self.kernel - 1) / 2;
        let mut h = x;
        for block in &self.blocks {
            let c = tape.conv1d(h, bound.node(block.w), 1, pad)?;
            let cb = tape.add(c, bound.node(block.b))?;
            let act = tape.gelu(cb);
            h = tape.maxpool2(act)?;
        }
        // [B, d_h, L] → [B, L, d_h]
        tape.permute(h, &[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { d_h: 16, bin_size: 32, seq_len: 256, stem_kernel: 5, ..Default::default() }
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamSet<f64>, StemParams) {
        let mut params = ParamSet::new();
        let mut rng = Rng::stream(seed, "stem-test", 0);
        let stem = StemParams::init(cfg, &mut params, &mut rng);
        (params, stem)
    }

    #[test]
    fn output_length_is_seq_over_bin() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.n_conv_blocks(), 5);
        let (params, stem) = build(&cfg, 1);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let mut rng = Rng::new(2);
        let x = tape.constant(Tensor::uniform(&[2, 4, 256], 0.0, 1.0, &mut rng));
        let y = stem.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 16]);
    }

    #[test]
    fn bin_128_needs_seven_blocks() {
        let cfg = ModelConfig { bin_size: 128, ..Default::default() };
        assert_eq!(cfg.n_conv_blocks(), 7);
        assert_eq!(channel_ramp(64, 7).len(), 7);
        assert_eq!(channel_ramp(64, 7)[6], 64);
        assert_eq!(channel_ramp(64, 7)[0], 32);
    }

    #[test]
    fn deterministic_forward() {
        let cfg = tiny_cfg();
        let (params, stem) = build(&cfg, 3);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros(&[1, 4, 256]));
            let y = stem.forward(&mut tape, &bound, x).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "all-zero input must give bitwise identical outputs");
    }

    #[test]
    fn shift_by_one_bin_shifts_interior_bins() {
        let cfg = tiny_cfg();
        let (params, stem) = build(&cfg, 7);
        let bin = cfg.bin_size;
        let seq = 256usize;
        let mut rng = Rng::new(9);
        // Base sequence one-hot; shifted copy moves content one bin right,
        // repadding the vacated left bin with a constant base (A).
        let mut base = Tensor::<f64>::zeros(&[1, 4, seq]);
        for pos in 0..seq {
            let b = rng.below(4);
            base.data_mut()[b * seq + pos] = 1.0;
        }
        let mut shifted = Tensor::<f64>::zeros(&[1, 4, seq]);
        for pos in 0..seq - bin {
            for b in 0..4 {
                let v = base.data()[b * seq + pos];
                shifted.data_mut()[b * seq + pos + bin] = v;
            }
        }
        for pos in 0..bin {
            shifted.data_mut()[pos] = 1.0; // A-filled pad
        }
        let eval = |x0: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape, false);
            let x = tape.constant(x0.clone());
            let y = stem.forward(&mut tape, &bound, x).unwrap();
            tape.value(y).clone()
        };
        let ya = eval(&base);
        let yb = eval(&shifted);
        let l = 8usize;
        let d = 16usize;
        // Receptive-field radius is 62 bp (~2 bins); compare bins whose
        // receptive field avoids both the repadded left edge and the
        // content dropped off the right edge.
        for t in 3..l - 2 {
            for c in 0..d {
                let a = ya.data()[(t - 1) * d + c];
                let b = yb.data()[t * d + c];
                assert!(
                    (a - b).abs() < 1e-5,
                    "bin {t} channel {c}: shifted {b} vs base {a}"
                );
            }
        }
    }
}
