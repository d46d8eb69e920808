fn main() {
    let checks: Vec<(&str, fn(u64) -> space_core::gradcheck::CheckReport)> = vec![
        ("attention", space_core::gradcheck::check_attention),
        ("stem", space_core::gradcheck::check_stem),
        ("encoder", space_core::gradcheck::check_encoder),
        ("decoder", space_core::gradcheck::check_decoder),
        ("end_to_end", space_core::gradcheck::check_end_to_end),
    ];
    for (name, f) in checks {
        let t0 = std::time::Instant::now();
        let r = f(17);
        println!("{:<12} {:.3e}  {:?}", name, r.max_rel_err, t0.elapsed());
    }
    let t0 = std::time::Instant::now();
    let _ = space_core::gradcheck::check_ops_suite(17);
    println!("ops suite: {:?}", t0.elapsed());
}
