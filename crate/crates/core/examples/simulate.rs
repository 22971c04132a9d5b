//! One full simulation of a method under one seed, written as a run
//! directory.
//!
//!     cargo run --release --example simulate -- [cdfl|fedsoft-async|local] [seed] [out-dir]

use std::path::PathBuf;

use cdfl::harness::{run, SimulationPlan};
use cdfl::{Method, ScenarioConfig};

fn main() -> cdfl::Result<()> {
    let mut args = std::env::args().skip(1);
    let method: Method = args
        .next()
        .map(|m| m.parse::<Method>())
        .transpose()?
        .unwrap_or(Method::Cdfl);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| format!("runs/example-{method}-seed{seed}")));

    let cfg = ScenarioConfig::default();
    let report = run(&SimulationPlan::from_scenario(&cfg, method, seed), &cfg)?;
    println!("{} syncs by {} clients, {} downloads", report.totals.syncs, report.clients, report.totals.downloads);
    for s in report.sessions.iter().step_by(4) {
        println!(
            "session {:>2}: before {:.3} after {:.3} cluster {}",
            s.session,
            s.mean_acc_before,
            s.mean_acc_after,
            s.cluster_accuracy.map_or("-".into(), |a| format!("{a:.3}"))
        );
    }
    if let Some(kl) = report.mean_kl() {
        println!("mean KL {kl:.4}");
    }
    report.write_dir(&out, &cfg)?;
    println!("wrote {}", out.display());
    Ok(())
}
