use latch_core::selftest::primitive_sweep;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, rep) in primitive_sweep(7, 1e-3).unwrap() {
        println!("{name}: {rep:?}");
        assert!(rep.max_rel_error < 1e-4, "{name}: {rep:?}");
    }
}
