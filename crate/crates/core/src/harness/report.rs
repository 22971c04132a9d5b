use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimulationPlan;
use crate::client::SyncRecord;
use crate::config::{Method, ScenarioConfig};
use crate::error::Result;
use crate::estimation::WeightEstimate;
use crate::server::{RepositorySnapshot, ServerEvent};

/// Held-out accuracy and loss of every cluster model after one epoch.
/// Entry 0 describes the pretrained repository.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub cluster_accuracy: Vec<f64>,
    pub cluster_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub first_epoch: u64,
    pub last_epoch: u64,
    pub syncs: usize,
    pub mean_acc_before: f64,
    pub mean_acc_after: f64,
    pub mean_kl: Option<f64>,
    /// Mean cluster accuracy at the session's last epoch.
    pub cluster_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTotals {
    pub syncs: u64,
    pub uploads: u64,
    pub downloads: u64,
    pub proxy_loss_evaluations: u64,
    pub client_loss_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub clients: usize,
    pub clusters: usize,
    pub totals: RunTotals,
    pub sessions: Vec<SessionSummary>,
    pub epochs: Vec<EpochMetrics>,
    pub records: Vec<SyncRecord>,
    pub events: Vec<ServerEvent>,
    pub repository: Option<RepositorySnapshot>,
}

/// Splits the record log into sessions. A session closes as soon as every
/// client that still has syncs ahead of it has synced since the previous
/// boundary; whatever is left at the end forms a final partial session.
///
/// Returns half-open index ranges into `records`.
pub fn partition_sessions(records: &[SyncRecord]) -> Vec<std::ops::Range<usize>> {
    let mut last_seen = std::collections::BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        last_seen.insert(r.client_id, i);
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen = BTreeSet::new();
    let mut needed = last_seen.len();
    for (i, r) in records.iter().enumerate() {
        seen.insert(r.client_id);
        if seen.len() == needed {
            out.push(start..i + 1);
            start = i + 1;
            seen.clear();
            needed = last_seen.values().filter(|&&l| l >= start).count();
        }
    }
    if start < records.len() {
        out.push(start..records.len());
    }
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.into_iter().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

impl RunReport {
    pub(crate) fn assemble(
        plan: &SimulationPlan,
        clusters: usize,
        records: Vec<SyncRecord>,
        epochs: Vec<EpochMetrics>,
        totals: RunTotals,
        events: Vec<ServerEvent>,
        repository: Option<RepositorySnapshot>,
    ) -> Self {
        let sessions = partition_sessions(&records)
            .into_iter()
            .enumerate()
            .map(|(s, range)| {
                let rs = &records[range];
                let last_epoch = rs.last().map_or(0, |r| r.epoch);
                let cluster_accuracy = epochs
                    .iter()
                    .rev()
                    .find(|e| e.epoch <= last_epoch)
                    .and_then(|e| mean(e.cluster_accuracy.iter().copied()));
                SessionSummary {
                    session: s,
                    first_epoch: rs.first().map_or(0, |r| r.epoch),
                    last_epoch,
                    syncs: rs.len(),
                    mean_acc_before: mean(rs.iter().map(|r| r.acc_before)).unwrap_or(f64::NAN),
                    mean_acc_after: mean(rs.iter().map(|r| r.acc_after)).unwrap_or(f64::NAN),
                    mean_kl: mean(rs.iter().filter_map(|r| r.kl)),
                    cluster_accuracy,
                }
            })
            .collect();
        Self {
            method: plan.method,
            seed: plan.seed,
            clients: plan.clients,
            clusters,
            totals,
            sessions,
            epochs,
            records,
            events,
            repository,
        }
    }

    pub fn mean_acc_before(&self) -> f64 {
        mean(self.records.iter().map(|r| r.acc_before)).unwrap_or(f64::NAN)
    }

    pub fn mean_acc_after(&self) -> f64 {
        mean(self.records.iter().map(|r| r.acc_after)).unwrap_or(f64::NAN)
    }

    /// Mean KL over uploads that carried an estimate.
    pub fn mean_kl(&self) -> Option<f64> {
        mean(self.records.iter().filter_map(|r| r.kl))
    }

    /// Mean over clusters of held-out accuracy after the last epoch.
    pub fn final_cluster_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| mean(e.cluster_accuracy.iter().copied()))
    }

    /// Mean before/after accuracy over the last `n` sessions, computed from
    /// the underlying records.
    pub fn tail_accuracy(&self, n: usize) -> (f64, f64) {
        let ranges = partition_sessions(&self.records);
        let from = ranges.len().saturating_sub(n);
        let start = ranges.get(from).map_or(self.records.len(), |r| r.start);
        let tail = &self.records[start..];
        (
            mean(tail.iter().map(|r| r.acc_before)).unwrap_or(f64::NAN),
            mean(tail.iter().map(|r| r.acc_after)).unwrap_or(f64::NAN),
        )
    }

    /// Per-cluster mean held-out loss over the first and last third of the
    /// processed epochs (the pretrained entry is excluded).
    pub fn loss_thirds(&self) -> Vec<(f64, f64)> {
        let series = self.epochs.get(1..).unwrap_or(&[]);
        let third = series.len() / 3;
        if third == 0 {
            return Vec::new();
        }
        let first = &series[..third];
        let last = &series[series.len() - third..];
        (0..self.clusters)
            .map(|k| {
                let f = mean(first.iter().map(|e| e.cluster_loss[k])).unwrap_or(f64::NAN);
                let l = mean(last.iter().map(|e| e.cluster_loss[k])).unwrap_or(f64::NAN);
                (f, l)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_uploads_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "client_id", "round", "stale", "acc_before", "acc_after", "kl", "true_weights", "est_weights"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.client_id.0.to_string(),
                r.round.to_string(),
                r.stale.to_string(),
                r.acc_before.to_string(),
                r.acc_after.to_string(),
                r.kl.map(|k| k.to_string()).unwrap_or_default(),
                join_weights(Some(&r.true_weights)),
                join_weights(r.est_weights.as_ref()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sessions_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["session", "first_epoch", "last_epoch", "syncs", "mean_acc_before", "mean_acc_after", "mean_kl", "cluster_accuracy"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.sessions {
            w.write_record([
                s.session.to_string(),
                s.first_epoch.to_string(),
                s.last_epoch.to_string(),
                s.syncs.to_string(),
                s.mean_acc_before.to_string(),
                s.mean_acc_after.to_string(),
                opt(s.mean_kl),
                opt(s.cluster_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format: one row per (epoch, cluster).
    pub fn write_epochs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "cluster", "accuracy", "loss"])?;
        for e in &self.epochs {
            for (k, (a, l)) in e.cluster_accuracy.iter().zip(&e.cluster_loss).enumerate() {
                w.write_record([e.epoch.to_string(), k.to_string(), a.to_string(), l.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the whole run directory: `config.toml`, `report.json`,
    /// `uploads.csv`, `sessions.csv` and `records.jsonl`, plus `epochs.csv`,
    /// `events.jsonl` and `repository.json` for methods with a server.
    pub fn write_dir(&self, dir: &Path, cfg: &ScenarioConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut resolved = cfg.clone();
        resolved.seed = self.seed;
        resolved.simulation.method = self.method;
        resolved.simulation.clients = Some(self.clients);
        fs::write(dir.join("config.toml"), resolved.to_toml_string()?)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        self.write_uploads_csv(fs::File::create(dir.join("uploads.csv"))?)?;
        self.write_sessions_csv(fs::File::create(dir.join("sessions.csv"))?)?;
        write_jsonl(&dir.join("records.jsonl"), &self.records)?;
        if let Some(snap) = &self.repository {
            self.write_epochs_csv(fs::File::create(dir.join("epochs.csv"))?)?;
            write_jsonl(&dir.join("events.jsonl"), &self.events)?;
            fs::write(dir.join("repository.json"), snap.to_json_bytes()?)?;
        }
        Ok(())
    }
}

fn join_weights(w: Option<&WeightEstimate>) -> String {
    w.map(|w| w.weights().iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
