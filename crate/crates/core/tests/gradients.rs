use reviewkd::oracles::{kernel_checks, module_checks, OpCheck, GRAD_PASS_FRACTION, GRAD_TOL};

fn assert_all_pass(checks: &[OpCheck]) {
    let mut failed = Vec::new();
    for c in checks {
        let s = c.summary().unwrap();
        println!(
            "{:<28} max {:.2e} mean {:.2e} pass {:.4} over {} coords",
            c.name,
            s.max_rel_err,
            s.mean_rel_err,
            s.pass_fraction(GRAD_TOL),
            s.samples
        );
        if s.pass_fraction(GRAD_TOL) < GRAD_PASS_FRACTION {
            failed.push(c.name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient checks failed: {failed:?}");
}

#[test]
fn kernels_match_finite_differences() {
    assert_all_pass(&kernel_checks(7).unwrap());
}

#[test]
fn modules_match_finite_differences() {
    assert_all_pass(&module_checks(7).unwrap());
}
