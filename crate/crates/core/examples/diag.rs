use space_core::checkpoint::Checkpoint;
use space_core::config::ModelConfig;
use space_core::data::{batch_from_records, schema_from_counts, Dataset};
use space_core::model::Model;
use space_core::objectives::predicted_rate;
use space_core::Tape;

fn spread(model: &Model<f32>, ds: &Dataset) -> f64 {
    // How much do predictions differ between two records?
    let mut outs = Vec::new();
    for rec in [0usize, 1] {
        let batch = batch_from_records::<f32>(ds, 0, &[rec]);
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, false);
        let pass = model.forward(&mut tape, &bound, &batch.x, 0, false, None).unwrap();
        let rate = predicted_rate(&mut tape, pass.o_final);
        outs.push(tape.value(rate).data().to_vec());
    }
    outs[0].iter().zip(outs[1].iter()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max)
}

fn main() {
    let ds = Dataset::load(std::path::Path::new("/tmp/desk/ds")).unwrap();
    let schema = schema_from_counts(&[("human", [2, 2, 2, 2]), ("mouse", [2, 2, 2, 2])]);
    let fresh = Model::<f32>::new(ModelConfig::default(), schema, 101).unwrap();
    println!("fresh model cross-record spread: {:.6}", spread(&fresh, &ds));

    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/desk/model.ckpt")).unwrap();
    let (trained, _) = ckpt.into_model().unwrap();
    println!("trained model cross-record spread: {:.6}", spread(&trained, &ds));

    for name in ["stem.block0.w", "stem.block3.w", "stem.block6.w", "enc.layer0.attn.q.w"] {
        for (m, label) in [(&fresh, "fresh"), (&trained, "trained")] {
            let id = m.params.find(name).unwrap();
            let v = m.params.value(id);
            let norm: f64 =
                v.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            println!("{label:8} {name}: l2 {norm:.4} max {:.4}", v.max_abs());
        }
    }
}
