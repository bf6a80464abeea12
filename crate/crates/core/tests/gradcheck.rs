use std::time::Instant;

use milbag_core::gradsuite::standard_suite;

#[test]
fn every_op_matches_central_differences() {
    let start = Instant::now();
    let cases = standard_suite().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    for c in &cases {
        println!(
            "{:<40} max rel err {:.2e} over {} elements",
            c.name, c.report.max_relative_error, c.report.elements_checked
        );
        assert!(c.report.elements_checked > 0, "{} checked nothing", c.name);
        if !c.report.passes(1e-4) {
            failures.push(c.name);
        }
    }
    assert!(failures.is_empty(), "failing cases: {failures:?}");
    assert!(elapsed < 60.0, "suite took {elapsed:.1}s");
}
