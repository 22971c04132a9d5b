//! Runs the acceptance suite on a reduced seed set and prints one line per
//! criterion. The full suite runs via `cdfl accept` or the `acceptance`
//! test target.
//!
//!     cargo run --release --example acceptance_suite

use cdfl::acceptance::{run_acceptance, AcceptanceOptions};

fn main() -> cdfl::Result<()> {
    let opts = AcceptanceOptions { seeds: vec![1, 2], ..AcceptanceOptions::default() };
    let report = run_acceptance(&opts, |o| println!("{o}"))?;
    let passed = report.outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} passed", report.outcomes.len());
    Ok(())
}
