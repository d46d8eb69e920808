// Diagnostic: stem + per-position linear head, species 0 only, free optimizer.
use space_core::config::ModelConfig;
use space_core::data::{batch_from_records, Dataset};
use space_core::metrics::pearson;
use space_core::model::{ParamSet, StemParams};
use space_core::objectives::predicted_rate;
use space_core::optim::{clip_global_norm, AdamW};
use space_core::rng::Rng;
use space_core::{Tape, Tensor};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let clip: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e9);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(800);
    let ds = Dataset::load(std::path::Path::new("/tmp/desk/ds4")).unwrap();
    let cfg = ModelConfig::default();
    let mut params = ParamSet::<f32>::new();
    let mut rng = Rng::stream(7, "stemfit", 0);
    let stem = StemParams::init(&cfg, &mut params, &mut rng);
    let c = 8usize;
    let head_w = params.add("head.w", Tensor::uniform(&[cfg.d_h, c], -(3.0f64/64.0).sqrt(), (3.0f64/64.0).sqrt(), &mut rng));
    let head_b = params.add("head.b", {
        let l = ds.bins();
        let n = ds.n_records(0);
        let data = ds.per_species[0].targets.data();
        let mut b = Tensor::zeros(&[c]);
        for t in 0..c {
            let mean: f64 = (0..n).flat_map(|r| (0..l).map(move |p| data[(r*c+t)*l+p] as f64)).sum::<f64>() / (n*l) as f64;
            b.data_mut()[t] = ((mean.exp() - 1.0) as f64).ln() as f32;
        }
        b
    });
    let tc = space_core::config::TrainConfig { weight_decay: 0.01, ..Default::default() };
    let mut opt = AdamW::new(&params, &tc);
    let mut order_rng = Rng::new(3);
    for step in 0..steps {
        let recs: Vec<usize> = (0..8).map(|_| order_rng.below(ds.n_records(0))).collect();
        let batch = batch_from_records::<f32>(&ds, 0, &recs);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(batch.x.clone());
        let h = stem.forward(&mut tape, &bound, x).unwrap();
        let proj = tape.linear(h, bound.node(head_w), bound.node(head_b)).unwrap();
        let o = tape.permute(proj, &[0, 2, 1]).unwrap();
        let rate = predicted_rate(&mut tape, o);
        let loss = tape.poisson_nll(rate, &batch.targets).unwrap();
        let lv = tape.value(loss).item().unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let mut glist: Vec<Tensor<f32>> = params.iter().map(|(id, _, v)| grads.take(bound.node(id)).unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();
        clip_global_norm(&mut glist, clip);
        opt.step(&mut params, &glist, lr);
        if step % 200 == 0 { println!("step {step}: loss {lv:.3}"); }
    }
    // Train-split pearson.
    let l = ds.bins();
    let n = ds.n_records(0);
    let mut preds = vec![Vec::new(); c];
    let mut targs = vec![Vec::new(); c];
    for start in (0..n).step_by(8) {
        let recs: Vec<usize> = (start..(start + 8).min(n)).collect();
        let batch = batch_from_records::<f32>(&ds, 0, &recs);
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(batch.x.clone());
        let h = stem.forward(&mut tape, &bound, x).unwrap();
        let proj = tape.linear(h, bound.node(head_w), bound.node(head_b)).unwrap();
        let o = tape.permute(proj, &[0, 2, 1]).unwrap();
        let rate = predicted_rate(&mut tape, o);
        let rv = tape.value(rate).data();
        let tv = batch.targets.data();
        for bi in 0..recs.len() {
            for t in 0..c {
                for p in 0..l {
                    preds[t].push(rv[(bi*c+t)*l+p] as f64);
                    targs[t].push(tv[(bi*c+t)*l+p] as f64);
                }
            }
        }
    }
    let rs: Vec<f64> = (0..c).map(|t| pearson(&preds[t], &targs[t]).unwrap_or(0.0)).collect();
    println!("stem-only pearson mean {:.4} range {:.3}..{:.3}", rs.iter().sum::<f64>()/c as f64,
        rs.iter().cloned().fold(1.0, f64::min), rs.iter().cloned().fold(-1.0, f64::max));
}
