use std::fmt;

use serde::{Deserialize, Serialize};

use super::{run, RunReport, SimulationPlan};
use crate::config::{Method, ScenarioConfig};
use crate::error::{Error, Result};

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub cli_before: Stat,
    pub cli_after: Stat,
    pub cluster: Option<Stat>,
    pub kl: Option<Stat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    /// `runs[i][j]` is method `i` under seed `j`.
    #[serde(skip)]
    pub runs: Vec<Vec<RunReport>>,
}

impl CompareSummary {
    pub fn runs_for(&self, method: Method) -> &[RunReport] {
        let i = Method::ALL.iter().position(|&m| m == method).unwrap_or(0);
        &self.runs[i]
    }

    pub fn to_csv(&self) -> String {
        let cell = |s: Option<Stat>| s.map(|s| format!("{},{}", s.mean, s.std)).unwrap_or_else(|| ",".into());
        let mut out = String::from("method,cli_before_mean,cli_before_std,cli_after_mean,cli_after_std,cluster_mean,cluster_std,kl_mean,kl_std\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.method,
                cell(Some(m.cli_before)),
                cell(Some(m.cli_after)),
                cell(m.cluster),
                cell(m.kl)
            ));
        }
        out
    }
}

impl fmt::Display for CompareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>18} {:>18} {:>18} {:>18}", "method", "cli-bfr", "cli-aft", "cluster", "kl")?;
        let opt = |s: Option<Stat>| s.map_or_else(|| "-".to_string(), |s| s.to_string());
        for m in &self.methods {
            writeln!(
                f,
                "{:<14} {:>18} {:>18} {:>18} {:>18}",
                m.method.as_str(),
                m.cli_before.to_string(),
                m.cli_after.to_string(),
                opt(m.cluster),
                opt(m.kl)
            )?;
        }
        Ok(())
    }
}

/// Runs every method under every seed, one thread per cell.
pub fn compare_methods(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<CompareSummary> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("comparison needs at least two seeds".into()));
    }
    cfg.validate()?;
    let runs: Vec<Vec<RunReport>> = std::thread::scope(|s| {
        let handles: Vec<Vec<_>> = Method::ALL
            .iter()
            .map(|&method| {
                seeds
                    .iter()
                    .map(|&seed| s.spawn(move || run(&SimulationPlan::from_scenario(cfg, method, seed), cfg)))
                    .collect()
            })
            .collect();
        handles
            .into_iter()
            .map(|row| row.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect())
            .collect::<Result<Vec<Vec<_>>>>()
    })?;

    let methods = Method::ALL
        .iter()
        .zip(&runs)
        .map(|(&method, reports)| {
            let col = |f: &dyn Fn(&RunReport) -> Option<f64>| -> Option<Stat> {
                reports.iter().map(f).collect::<Option<Vec<_>>>().map(|xs| Stat::of(&xs))
            };
            MethodSummary {
                method,
                cli_before: Stat::of(&reports.iter().map(RunReport::mean_acc_before).collect::<Vec<_>>()),
                cli_after: Stat::of(&reports.iter().map(RunReport::mean_acc_after).collect::<Vec<_>>()),
                cluster: col(&|r| r.final_cluster_accuracy()),
                kl: col(&|r| r.mean_kl()),
            }
        })
        .collect();
    Ok(CompareSummary { seeds: seeds.to_vec(), methods, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        // sqrt(5/3) computed by hand
        assert!((s.std - 1.290_994_448_735_805_6).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
    }
}
