//! Deterministic logical-time simulation of the whole system and the two
//! baselines, plus metric collection and export.
//!
//! One epoch is one processed upload. A seeded scheduler picks the next
//! uploader uniformly among clients whose cool-down has elapsed; all three
//! methods share the scheduler stream and every client's data stream, so
//! runs under one seed are paired.

mod compare;
mod fedsoft;
mod report;
mod sim;

pub use compare::{compare_methods, CompareSummary, MethodSummary, Stat};
pub use fedsoft::client_side_estimate;
pub use report::{partition_sessions, EpochMetrics, RunReport, RunTotals, SessionSummary};
pub use sim::{evaluate_cluster_accuracy, run, run_fedsoft_async, run_local, run_simulation, Environment};

use serde::{Deserialize, Serialize};

use crate::client::UploadPolicy;
use crate::config::{Method, ScenarioConfig};

/// Who runs, how often, and under which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationPlan {
    pub clients: usize,
    pub syncs_per_client: usize,
    pub seed: u64,
    pub method: Method,
    pub upload_policy: UploadPolicy,
}

impl SimulationPlan {
    pub fn from_scenario(cfg: &ScenarioConfig, method: Method, seed: u64) -> Self {
        Self {
            clients: cfg.clients(),
            syncs_per_client: cfg.simulation.syncs_per_client,
            seed,
            method,
            upload_policy: cfg.simulation.upload_policy,
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Init = 1,
    PretrainData = 2,
    PretrainSgd = 3,
    Proxy = 4,
    Heldout = 5,
    ClientData = 6,
    ClientTrain = 7,
    Schedule = 8,
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub(crate) fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
