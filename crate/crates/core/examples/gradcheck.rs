//! Finite-difference checks of every analytic gradient.
//!
//! cargo run --example gradcheck -- [seeds]

use topoquant::gradcheck::{run_gradcheck, GradcheckOptions, Term};

fn main() {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let opts = GradcheckOptions {
        seeds,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts, &Term::ALL);
    print!("{}", report.to_table());
    println!("step {:e}, tolerance {:e}, all passed: {}", report.step, report.tolerance, report.passed());
}
