use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::estimation::WeightEstimate;
use crate::model::LossModel;
use crate::params::ParamVector;

/// Client-side mixture estimate of the soft-clustering baseline: each sample
/// is assigned to the cluster model with the smallest loss on it (ties go to
/// the lowest index), and the estimate is the fraction won by each cluster.
///
/// Costs `K * n` loss evaluations on the client.
pub fn client_side_estimate(
    model: &LossModel,
    clusters: &[ParamVector],
    data: &LabeledDataset,
) -> Result<WeightEstimate> {
    if clusters.is_empty() {
        return Err(Error::Contract("client-side estimation needs at least one cluster".into()));
    }
    let losses = clusters
        .iter()
        .map(|w| model.sample_losses(w, data))
        .collect::<Result<Vec<_>>>()?;
    let mut wins = vec![0usize; clusters.len()];
    for i in 0..data.len() {
        let mut best = 0;
        for k in 1..clusters.len() {
            if losses[k][i] < losses[best][i] {
                best = k;
            }
        }
        wins[best] += 1;
    }
    let n = data.len() as f64;
    let mut w: Vec<f64> = wins.iter().map(|&c| c as f64 / n).collect();
    let drift = 1.0 - w.iter().sum::<f64>();
    let top = (0..w.len()).max_by_key(|&k| wins[k]).unwrap_or(0);
    w[top] += drift;
    WeightEstimate::new(w)
}
