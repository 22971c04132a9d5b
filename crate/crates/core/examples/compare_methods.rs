//! Runs every method under several seeds and prints the summary table.
//!
//!     cargo run --release --example compare_methods -- [seeds, default 1,2,3]

use cdfl::harness::compare_methods;
use cdfl::{Method, ScenarioConfig};

fn main() -> cdfl::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);
    let cfg = ScenarioConfig::default();
    let summary = compare_methods(&cfg, &seeds)?;
    print!("{summary}");

    // Runs under one seed see the same client data, so gains pair up.
    let cdfl = summary.runs_for(Method::Cdfl);
    let local = summary.runs_for(Method::Local);
    for (a, b) in cdfl.iter().zip(local) {
        println!("seed {}: cdfl - local = {:+.4}", a.seed, a.mean_acc_after() - b.mean_acc_after());
    }
    Ok(())
}
