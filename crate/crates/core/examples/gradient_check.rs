//! Finite-difference check of every op and the composed objective.

use spcl::gradcheck;

fn main() -> spcl::Result<()> {
    let report = gradcheck::run(5, 0)?;
    for c in &report.cases {
        println!("{:<24} {:.2e}", c.name, c.max_rel_error);
    }
    println!(
        "max {:.2e}, prototypes receive no gradient: {}, passed: {}",
        report.max_rel_error(),
        report.prototype_grad_zero,
        report.passed()
    );
    Ok(())
}
