//! Finite-difference check of the prototype and adapter gradients.

use fsosr::gradcheck::DEFAULT_TOLERANCE;
use fsosr::{run_gradcheck, GradcheckConfig};

fn main() -> fsosr::Result<()> {
    let report = run_gradcheck(&GradcheckConfig {
        instances: 3,
        ..GradcheckConfig::default()
    })?;
    for case in &report.cases {
        println!(
            "{:<28} {:>4} coords  max rel error {:.2e}",
            case.component, case.coordinates, case.max_rel_error
        );
    }
    println!("passed: {}", report.passed(DEFAULT_TOLERANCE));
    Ok(())
}
