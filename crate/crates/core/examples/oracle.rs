use space_core::data::synth::{build_rules, lambda_profile, SynthParams};
use space_core::data::{schema_from_counts, Dataset};
use space_core::metrics::pearson;

fn main() {
    let schema = schema_from_counts(&[("human", [2, 2, 2, 2]), ("mouse", [2, 2, 2, 2])]);
    let params = SynthParams::default();
    let seed = 1234u64;
    let ds = Dataset::generate(&schema, 256, 2048, 128, seed, &params).unwrap();
    let rules = build_rules(&schema, &params, seed);
    let l = ds.bins();
    let c = 8usize;
    let mut per_track_r = Vec::new();
    let mut mean_r = Vec::new();
    for m in 0..2 {
        for t in 0..c {
            let mut lam_all = Vec::new();
            let mut tgt_all = Vec::new();
            let mut pos_mean = vec![0.0f64; l];
            for rec in 0..ds.n_records(m) {
                let lam = lambda_profile(&ds.per_species[m].sequences[rec], &rules[m], c, 128, params.base_rate);
                for pos in 0..l {
                    lam_all.push(lam[t * l + pos]);
                    tgt_all.push(ds.per_species[m].targets.data()[(rec * c + t) * l + pos] as f64);
                    pos_mean[pos] += lam[t * l + pos] / ds.n_records(m) as f64;
                }
            }
            per_track_r.push(pearson(&lam_all, &tgt_all).unwrap());
            // Positional-mean predictor (what a sequence-blind model learns).
            let pm: Vec<f64> = (0..lam_all.len()).map(|i| pos_mean[i % l]).collect();
            mean_r.push(pearson(&pm, &tgt_all).unwrap_or(0.0));
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("oracle (true rate) mean pearson: {:.4}  min {:.4}", avg(&per_track_r), per_track_r.iter().cloned().fold(1.0, f64::min));
    println!("positional-mean predictor mean pearson: {:.4}", avg(&mean_r));
    let mx = ds.per_species[0].targets.data().iter().cloned().fold(0.0f32, f32::max);
    println!("max target count: {mx}");
}
