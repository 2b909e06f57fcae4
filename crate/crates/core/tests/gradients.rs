mod common;

use common::{gradient_suite, FD_REL_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, r) in gradient_suite().unwrap() {
        assert!(r.checked > 0, "{name}: nothing checked");
        if !r.passes(FD_REL_TOL) {
            failures.push(format!("{name}: {r:?}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn suite_covers_composed_graphs() {
    let names: Vec<_> = common::gradient_cases().into_iter().map(|c| c.0).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("composed")).count(), 3);
    assert!(names.len() >= 24);
}
