mod common;

#[test]
fn every_update_matches_its_conditioned_gaussian_or_inverse_gamma() {
    let report = common::full_conditional_report(20_000, 11);
    for (name, z) in &report {
        assert!(*z < 4.0, "{name}: max |z| = {z:.2}");
    }
    assert_eq!(report.len(), 6 + 4 + 1 + 4 + 3 + 4 + 1);
}
