//! Synthetic rotated-class distributions and time-varying client mixtures.
//!
//! Cluster `k` places `C` class centroids evenly on a circle and rotates the
//! whole layout by `k * 360 / K` degrees; samples are centroids plus
//! isotropic Gaussian noise. All clusters share the class structure and
//! differ only by the rotation.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::estimation::WeightEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    pub index: usize,
    pub clusters: usize,
    pub classes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl ClusterDistribution {
    /// All `K` clusters of one scenario.
    pub fn family(clusters: usize, classes: usize, radius: f64, sigma: f64) -> Vec<Self> {
        (0..clusters)
            .map(|index| Self { index, clusters, classes, radius, sigma })
            .collect()
    }

    pub fn rotation(&self) -> f64 {
        TAU * self.index as f64 / self.clusters as f64
    }

    pub fn centroid(&self, class: usize) -> [f64; 2] {
        let angle = TAU * class as f64 / self.classes as f64 + self.rotation();
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }

    /// `n` samples with labels drawn uniformly over classes.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<LabeledDataset> {
        if n == 0 {
            return Err(Error::Contract("sample_cluster needs n >= 1".into()));
        }
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        let noise = Normal::new(0.0, self.sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?;
        for _ in 0..n {
            let y = rng.random_range(0..self.classes);
            let [cx, cy] = self.centroid(y);
            features.push(cx + noise.sample(rng));
            features.push(cy + noise.sample(rng));
            labels.push(y);
        }
        LabeledDataset::new(features, labels, 2, self.classes)
    }
}

/// Splits `n` items in proportion to `weights`: floors first, then the
/// leftover units go to the largest fractional parts (ties to the lower
/// index).
pub fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-client rule for drawing fresh mixture weights and sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSchedule {
    pub primary: usize,
    pub clusters: usize,
    pub share_min: f64,
    pub share_max: f64,
    pub samples_min: usize,
    pub samples_max: usize,
}

impl MixtureSchedule {
    /// Target weights: the primary cluster takes a uniform share in
    /// `[share_min, share_max]`; the rest is split across the other clusters
    /// at a uniformly random point of their simplex.
    pub fn draw_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.clusters;
        let share = if self.share_max > self.share_min {
            rng.random_range(self.share_min..=self.share_max)
        } else {
            self.share_min
        };
        let mut w = vec![0.0; k];
        w[self.primary] = share;
        if k > 1 {
            let gaps: Vec<f64> = (0..k - 1).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = gaps.iter().sum();
            let others = (0..k).filter(|&i| i != self.primary);
            for (i, g) in others.zip(&gaps) {
                w[i] = (1.0 - share) * g / total;
            }
        }
        w
    }
}

/// One client data draw: training set, same-mixture test set, and the
/// realized mixture weights.
#[derive(Debug, Clone)]
pub struct ClientDraw {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub weights: WeightEstimate,
}

fn draw_counts<R: Rng + ?Sized>(
    counts: &[usize],
    dists: &[ClusterDistribution],
    rng: &mut R,
) -> Result<LabeledDataset> {
    let parts = counts
        .iter()
        .zip(dists)
        .filter(|(c, _)| **c > 0)
        .map(|(&c, d)| d.sample(c, rng))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::concat(&parts)
}

/// Draws a training set whose per-cluster counts follow the schedule's
/// weights, and returns the realized proportions as ground truth.
pub fn draw_client_data<R: Rng + ?Sized>(
    sched: &MixtureSchedule,
    dists: &[ClusterDistribution],
    rng: &mut R,
) -> Result<(LabeledDataset, WeightEstimate)> {
    if sched.clusters < 2 || dists.len() != sched.clusters {
        return Err(Error::Contract("client mixtures need K >= 2 matching distributions".into()));
    }
    let target = sched.draw_weights(rng);
    let n = rng.random_range(sched.samples_min..=sched.samples_max);
    draw_with_weights(&target, n, dists, rng)
}

pub(crate) fn draw_with_weights<R: Rng + ?Sized>(
    target: &[f64],
    n: usize,
    dists: &[ClusterDistribution],
    rng: &mut R,
) -> Result<(LabeledDataset, WeightEstimate)> {
    let counts = largest_remainder(target, n);
    let data = draw_counts(&counts, dists, rng)?;
    let realized = normalized(&counts);
    Ok((data, realized))
}

fn normalized(counts: &[usize]) -> WeightEstimate {
    let n: usize = counts.iter().sum();
    let mut w: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    // Absorb rounding so the weights pass the simplex check exactly.
    let drift: f64 = 1.0 - w.iter().sum::<f64>();
    if let Some(max) = w.iter_mut().max_by(|a, b| a.partial_cmp(b).unwrap()) {
        *max += drift;
    }
    WeightEstimate::new(w).expect("count proportions lie on the simplex")
}

/// A training draw plus a test set of `test_samples` from the same realized
/// mixture.
pub fn draw_client_round<R: Rng + ?Sized>(
    sched: &MixtureSchedule,
    dists: &[ClusterDistribution],
    test_samples: usize,
    rng: &mut R,
) -> Result<ClientDraw> {
    let (train, weights) = draw_client_data(sched, dists, rng)?;
    let test_counts = largest_remainder(weights.weights(), test_samples);
    let test = draw_counts(&test_counts, dists, rng)?;
    Ok(ClientDraw { train, test, weights })
}
