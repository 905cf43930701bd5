mod common;

use common::{module_error, MODULES};
use geode_tensor::gradcheck::DEFAULT_TOL;

const INSTANCES: u64 = 20;

#[test]
fn model_modules_match_finite_differences() {
    let mut failures = Vec::new();
    for module in MODULES {
        let worst = (0..INSTANCES).map(|i| module_error(module, i)).fold(0.0, f64::max);
        if !(worst < DEFAULT_TOL) {
            failures.push(format!("{module}: {worst:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
