use ifss_core::gradsuite::{self, TOLERANCE};
use std::time::Instant;

#[test]
fn every_trainable_path_matches_finite_differences() {
    let start = Instant::now();
    let reports = gradsuite::run_all(2024).unwrap();
    for r in &reports {
        println!("{:<10} instances={} max_rel_error={:.3e}", r.name, r.instances, r.max_rel_error);
    }
    for r in &reports {
        assert!(r.max_rel_error < TOLERANCE, "{} failed: {:.3e}", r.name, r.max_rel_error);
    }
    assert!(start.elapsed().as_secs() < 60);
}
