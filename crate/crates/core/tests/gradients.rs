mod common;

use common::grad_suite::all_checks;

#[test]
fn every_module_and_loss_passes_finite_differences_on_twenty_seeds() {
    let mut failures = Vec::new();
    for seed in 0..20 {
        for (name, report) in all_checks(seed) {
            if !report.passed() {
                failures.push(format!("seed {seed} {name}: worst {:e}", report.worst()));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
