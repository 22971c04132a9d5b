//! Loads `repository.json` from a CDFL run directory, rebuilds the server,
//! and reports how well each saved cluster model does on fresh held-out
//! data.
//!
//!     cargo run --release --example simulate -- cdfl 1 runs/replay
//!     cargo run --release --example replay_snapshot -- runs/replay

use std::path::PathBuf;

use cdfl::harness::{evaluate_cluster_accuracy, Environment};
use cdfl::server::RepositorySnapshot;
use cdfl::{ScenarioConfig, ServerState};

fn main() -> cdfl::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/replay".into()));
    let cfg = ScenarioConfig::from_path(&dir.join("config.toml"))?;
    let snapshot = RepositorySnapshot::from_json_bytes(&std::fs::read(dir.join("repository.json"))?)?;
    let env = Environment::build(&cfg, cfg.seed)?;

    let server = ServerState::restore(cfg.server_config(), snapshot, env.proxies.clone(), cfg.model.clone())?;
    let repo = server.repository();
    println!("epoch {}, {} cached clients", server.epoch(), server.snapshot().cache.len());
    let start = evaluate_cluster_accuracy(&cfg.model, &env.pretrained, &env.heldout)?;
    let end = evaluate_cluster_accuracy(&cfg.model, &repo.models, &env.heldout)?;
    for k in 0..repo.clusters() {
        println!(
            "cluster {k}: pretrained {:.3} final {:.3} (last updated at epoch {})",
            start[k], end[k], repo.last_update[k]
        );
    }
    Ok(())
}
