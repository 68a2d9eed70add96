//! Finite-difference check of every differentiable operation.
//!
//!     cargo run --example gradient_check -- [cases]

use xlsor::gradcheck::run_suite;

fn main() -> xlsor::Result<()> {
    let cases = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let report = run_suite(cases, 0)?;
    for c in &report.checks {
        println!("{:<22} {:.2e} (tolerance {:.0e})", c.name, c.max_rel_error, c.tolerance);
    }
    println!("{}", if report.passed() { "all checks passed" } else { "some checks FAILED" });
    Ok(())
}
