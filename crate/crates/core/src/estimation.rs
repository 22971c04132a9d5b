//! Server-side distribution estimation and cluster update ratios.
//!
//! Given an uploaded client model, the server scores every cluster with three
//! metric families on that cluster's proxy data:
//!
//! * `loss`: the client model's loss on proxy `k`,
//! * `loss_gap`: `|F(w_k; D_k) - F(v; D_k)|`,
//! * `distance`: `||v - w_k||`.
//!
//! Each family is turned into a "share of the others" fraction, the
//! fractions are mixed with `c1`, `c2` and `1 - c1 - c2`, and the result is
//! sharpened by one or more temperature-scaled softmax passes. The estimate
//! then drives how far each cluster model moves toward the upload.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::model::LossModel;
use crate::params::{l2_distance, ParamVector};

/// Tolerance used for every simplex membership check.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Sums at or below this are treated as "no information" for a metric family.
const DEGENERATE_SUM: f64 = 1e-12;

/// Lower clamp applied to the estimate inside the KL divergence.
const KL_FLOOR: f64 = 1e-12;

/// A point on the K-simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightEstimate(Vec<f64>);

impl WeightEstimate {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Contract("weight estimate needs at least one entry".into()));
        }
        if weights
            .iter()
            .any(|w| !w.is_finite() || *w < -SIMPLEX_TOLERANCE || *w > 1.0 + SIMPLEX_TOLERANCE)
        {
            return Err(Error::Contract(format!("weights {weights:?} leave [0, 1]")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Contract(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// The vertex putting all mass on `index`.
    pub fn vertex(k: usize, index: usize) -> Self {
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        Self(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightEstimate {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightEstimate> for Vec<f64> {
    fn from(w: WeightEstimate) -> Self {
        w.0
    }
}

/// How the offset subtracted from a metric family is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BarRepr", into = "BarRepr")]
pub enum MetricBar {
    Constant(f64),
    /// Use the smallest value of the family across clusters.
    MinOfComputed,
}

/// How the survival threshold on the normalized estimate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BarRepr", into = "BarRepr")]
pub enum SurvivalBar {
    Constant(f64),
    /// Use the mean of the estimate, i.e. `1 / K`.
    AverageOfComputed,
}

/// Config-file spelling of a bar: either a number or a keyword.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum BarRepr {
    Value(f64),
    Keyword(String),
}

impl TryFrom<BarRepr> for MetricBar {
    type Error = String;
    fn try_from(r: BarRepr) -> std::result::Result<Self, String> {
        match r {
            BarRepr::Value(v) if v.is_finite() && v >= 0.0 => Ok(Self::Constant(v)),
            BarRepr::Value(v) => Err(format!("metric bar must be finite and >= 0, got {v}")),
            BarRepr::Keyword(k) if k == "min" => Ok(Self::MinOfComputed),
            BarRepr::Keyword(k) => Err(format!("unknown metric bar `{k}` (expected a number or \"min\")")),
        }
    }
}

impl From<MetricBar> for BarRepr {
    fn from(b: MetricBar) -> Self {
        match b {
            MetricBar::Constant(v) => BarRepr::Value(v),
            MetricBar::MinOfComputed => BarRepr::Keyword("min".into()),
        }
    }
}

impl TryFrom<BarRepr> for SurvivalBar {
    type Error = String;
    fn try_from(r: BarRepr) -> std::result::Result<Self, String> {
        match r {
            BarRepr::Value(v) if v.is_finite() => Ok(Self::Constant(v)),
            BarRepr::Value(v) => Err(format!("survival bar must be finite, got {v}")),
            BarRepr::Keyword(k) if k == "ave" => Ok(Self::AverageOfComputed),
            BarRepr::Keyword(k) => Err(format!("unknown survival bar `{k}` (expected a number or \"ave\")")),
        }
    }
}

impl From<SurvivalBar> for BarRepr {
    fn from(b: SurvivalBar) -> Self {
        match b {
            SurvivalBar::Constant(v) => BarRepr::Value(v),
            SurvivalBar::AverageOfComputed => BarRepr::Keyword("ave".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    /// Weight of the proxy-loss family.
    pub c1: f64,
    /// Weight of the loss-gap family; the distance family gets `1 - c1 - c2`.
    pub c2: f64,
    /// Softmax temperatures, applied in order.
    pub a_schedule: Vec<f64>,
    pub l_bar: MetricBar,
    pub d1_bar: MetricBar,
    pub d2_bar: MetricBar,
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.c1) || !unit(self.c2) || !unit(self.c1 + self.c2) {
            return Err(Error::InvalidConfig(format!(
                "need c1, c2, c1 + c2 in [0, 1], got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.a_schedule.is_empty() {
            return Err(Error::InvalidConfig("a_schedule must not be empty".into()));
        }
        if let Some(a) = self.a_schedule.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidConfig(format!("softmax temperature {a} must be > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioConfig {
    /// Largest fraction by which one upload may move a cluster model.
    pub beta0: f64,
    pub beta1_bar: SurvivalBar,
    /// Staleness decay slope.
    pub a: f64,
    /// Staleness grace window: gaps below `b` are not penalized.
    pub b: u64,
}

impl RatioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0 < 1.0) {
            return Err(Error::InvalidConfig(format!("beta0 must lie in (0, 1), got {}", self.beta0)));
        }
        if !(self.a.is_finite() && self.a >= 0.0) {
            return Err(Error::InvalidConfig(format!("a must be finite and >= 0, got {}", self.a)));
        }
        Ok(())
    }
}

/// The three metric families, one entry per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub loss: Vec<f64>,
    pub loss_gap: Vec<f64>,
    pub distance: Vec<f64>,
}

impl RawMetrics {
    pub fn clusters(&self) -> usize {
        self.loss.len()
    }
}

/// Per-cluster update ratios plus the last-update epochs after this upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRatios {
    pub ratios: Vec<f64>,
    pub updated: Vec<bool>,
    pub last_update: Vec<u64>,
}

/// Evaluates the three metric families for `client` against every cluster.
/// Costs `2K` proxy-loss evaluations.
pub fn raw_metrics(
    client: &ParamVector,
    clusters: &[ParamVector],
    proxies: &[LabeledDataset],
    model: &LossModel,
) -> Result<RawMetrics> {
    let k = clusters.len();
    if k < 2 {
        return Err(Error::Contract(format!("estimation needs K >= 2, got {k}")));
    }
    ensure_dim(k, proxies.len())?;
    let mut out = RawMetrics {
        loss: Vec::with_capacity(k),
        loss_gap: Vec::with_capacity(k),
        distance: Vec::with_capacity(k),
    };
    for (w, proxy) in clusters.iter().zip(proxies) {
        let l = model.empirical_loss(client, proxy)?;
        let cluster_loss = model.empirical_loss(w, proxy)?;
        out.loss.push(l);
        out.loss_gap.push((cluster_loss - l).abs());
        out.distance.push(l2_distance(client, w)?);
    }
    Ok(out)
}

fn subtract_bar(values: &[f64], bar: MetricBar) -> Vec<f64> {
    let offset = match bar {
        MetricBar::Constant(c) => c,
        MetricBar::MinOfComputed => values.iter().copied().fold(f64::INFINITY, f64::min),
    };
    values.iter().map(|v| (v - offset).max(0.0)).collect()
}

/// `sum_{i != k} m_i / sum_i m_i` for every `k`, or the uniform
/// `(K - 1) / K` when the family carries no mass.
fn other_share(values: &[f64]) -> Vec<f64> {
    let k = values.len();
    let sum: f64 = values.iter().sum();
    if !(sum > DEGENERATE_SUM) {
        return vec![(k - 1) as f64 / k as f64; k];
    }
    // Rescale so that huge but finite inputs cannot overflow the sums.
    let scale = values.iter().copied().fold(0.0, f64::max);
    let scaled: Vec<f64> = values.iter().map(|v| v / scale).collect();
    let total: f64 = scaled.iter().sum();
    (0..k)
        .map(|i| {
            let others: f64 = scaled.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            others / total
        })
        .collect()
}

/// Numerically stable softmax of `scores * temperature`.
pub fn softmax_scaled(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().map(|s| s * temperature).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s * temperature - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Turns raw metrics into an estimate of the client's mixture weights.
pub fn estimate_distribution(metrics: &RawMetrics, cfg: &EstimationConfig) -> Result<WeightEstimate> {
    let k = metrics.clusters();
    if k < 2 {
        return Err(Error::Contract(format!("estimation needs K >= 2, got {k}")));
    }
    ensure_dim(k, metrics.loss_gap.len())?;
    ensure_dim(k, metrics.distance.len())?;

    let frac_l = other_share(&subtract_bar(&metrics.loss, cfg.l_bar));
    let frac_d1 = other_share(&subtract_bar(&metrics.loss_gap, cfg.d1_bar));
    let frac_d2 = other_share(&subtract_bar(&metrics.distance, cfg.d2_bar));
    let c3 = 1.0 - cfg.c1 - cfg.c2;
    let norm = 1.0 / (k - 1) as f64;

    let mut scores: Vec<f64> = (0..k)
        .map(|i| norm * (cfg.c1 * frac_l[i] + cfg.c2 * frac_d1[i] + c3 * frac_d2[i]))
        .collect();
    for &temperature in &cfg.a_schedule {
        scores = softmax_scaled(&scores, temperature);
    }
    WeightEstimate::new(scores)
}

/// Staleness discount: 1 inside the grace window, `1 / (a * gap + 1)` after.
pub fn staleness_factor(gap: u64, a: f64, b: u64) -> f64 {
    if gap < b {
        1.0
    } else {
        1.0 / (a * gap as f64 + 1.0)
    }
}

/// Derives per-cluster update ratios from an estimate.
///
/// Clusters whose estimate falls below the survival bar get ratio 0 and keep
/// their last-update epoch. Survivors are normalized by the largest raw
/// estimate, stamped with epoch `t`, and discounted by the staleness
/// `t - tau`.
pub fn compute_update_ratios(
    est: &WeightEstimate,
    cfg: &RatioConfig,
    tau: u64,
    t: u64,
    last_update: &[u64],
) -> Result<UpdateRatios> {
    let w = est.weights();
    let k = w.len();
    if k < 2 {
        return Err(Error::Contract(format!("update ratios need K >= 2, got {k}")));
    }
    ensure_dim(k, last_update.len())?;
    if tau > t {
        return Err(Error::Contract(format!("client epoch {tau} is ahead of server epoch {t}")));
    }
    let max = w.iter().copied().fold(0.0, f64::max);
    let bar = match cfg.beta1_bar {
        SurvivalBar::Constant(c) => c,
        SurvivalBar::AverageOfComputed => w.iter().sum::<f64>() / k as f64,
    };
    let mut out = UpdateRatios {
        ratios: vec![0.0; k],
        updated: vec![false; k],
        last_update: last_update.to_vec(),
    };
    if max <= 0.0 {
        return Ok(out);
    }
    for i in 0..k {
        if w[i] < bar {
            continue;
        }
        let relevance = w[i] / max;
        out.last_update[i] = t;
        let staleness = staleness_factor(out.last_update[i] - tau, cfg.a, cfg.b);
        let ratio = cfg.beta0 * relevance * staleness;
        out.ratios[i] = ratio;
        out.updated[i] = ratio > 0.0;
    }
    Ok(out)
}

/// `KL(p || q)` in nats, with `0 * ln(0 / q) = 0` and `q` floored at 1e-12.
pub fn kl_divergence(p: &WeightEstimate, q: &WeightEstimate) -> Result<f64> {
    ensure_dim(p.len(), q.len())?;
    let kl: f64 = p
        .weights()
        .iter()
        .zip(q.weights())
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk.max(KL_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(w: &[f64]) -> WeightEstimate {
        WeightEstimate::new(w.to_vec()).unwrap()
    }

    fn loss_only(a: Vec<f64>) -> EstimationConfig {
        EstimationConfig {
            c1: 1.0,
            c2: 0.0,
            a_schedule: a,
            l_bar: MetricBar::Constant(0.0),
            d1_bar: MetricBar::Constant(0.0),
            d2_bar: MetricBar::Constant(0.0),
        }
    }

    fn ratio_cfg(bar: SurvivalBar) -> RatioConfig {
        RatioConfig { beta0: 0.025, beta1_bar: bar, a: 10.0, b: 5 }
    }

    #[test]
    fn symmetric_metrics_give_uniform() {
        let m = RawMetrics { loss: vec![2.0, 2.0], loss_gap: vec![0.3, 0.3], distance: vec![1.0, 1.0] };
        let cfg = EstimationConfig { c2: 0.3, ..loss_only(vec![3.0]) };
        let e = estimate_distribution(&m, &cfg).unwrap();
        assert_eq!(e.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_softmax_case() {
        // fractions (3/4, 1/4), single softmax: e^0.75 / (e^0.75 + e^0.25)
        let m = RawMetrics { loss: vec![1.0, 3.0], loss_gap: vec![0.0, 0.0], distance: vec![0.0, 0.0] };
        let e = estimate_distribution(&m, &loss_only(vec![1.0])).unwrap();
        assert!((e.weights()[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((e.weights()[1] - 0.377_540_668_798_145_4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_family_is_uniform_fraction() {
        assert_eq!(other_share(&[0.0, 0.0, 0.0]), vec![2.0 / 3.0; 3]);
        let m = RawMetrics { loss: vec![0.0; 3], loss_gap: vec![0.0; 3], distance: vec![0.0; 3] };
        let e = estimate_distribution(&m, &loss_only(vec![5.0])).unwrap();
        for w in e.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bars_clamp_and_min_mode() {
        assert_eq!(subtract_bar(&[1.0, 9.0], MetricBar::Constant(8.0)), vec![0.0, 1.0]);
        assert_eq!(subtract_bar(&[3.0, 5.0, 4.0], MetricBar::MinOfComputed), vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn repeated_softmax_sharpens() {
        let m = RawMetrics { loss: vec![1.0, 2.0, 4.0], loss_gap: vec![0.0; 3], distance: vec![0.0; 3] };
        let once = estimate_distribution(&m, &loss_only(vec![10.0])).unwrap();
        let twice = estimate_distribution(&m, &loss_only(vec![10.0, 10.0])).unwrap();
        let manual = softmax_scaled(once.weights(), 10.0);
        assert_eq!(twice.weights(), manual.as_slice());
        assert!(twice.weights()[0] > once.weights()[0]);
    }

    #[test]
    fn ratios_all_equal_weights_within_grace() {
        let r = compute_update_ratios(&WeightEstimate::uniform(4), &ratio_cfg(SurvivalBar::AverageOfComputed), 10, 12, &[0; 4]).unwrap();
        for x in &r.ratios {
            assert!((x - 0.025).abs() < 1e-15);
        }
        assert_eq!(r.last_update, vec![12; 4]);
    }

    #[test]
    fn average_bar_thresholding() {
        let r = compute_update_ratios(&est(&[0.6, 0.3, 0.1]), &ratio_cfg(SurvivalBar::AverageOfComputed), 3, 4, &[1, 2, 3]).unwrap();
        assert_eq!(r.ratios, vec![0.025, 0.0, 0.0]);
        assert_eq!(r.updated, vec![true, false, false]);
        assert_eq!(r.last_update, vec![4, 2, 3]);
    }

    #[test]
    fn staleness_decay_value() {
        assert!((staleness_factor(10, 10.0, 5) - 1.0 / 101.0).abs() < 1e-15);
        assert_eq!(staleness_factor(4, 10.0, 5), 1.0);
        assert_eq!(staleness_factor(5, 10.0, 5), 1.0 / 51.0);
        let r = compute_update_ratios(&est(&[0.5, 0.5]), &ratio_cfg(SurvivalBar::Constant(0.0)), 0, 10, &[0, 0]).unwrap();
        assert!((r.ratios[0] - 0.025 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn tau_ahead_of_t_is_rejected() {
        assert!(compute_update_ratios(&WeightEstimate::uniform(2), &ratio_cfg(SurvivalBar::AverageOfComputed), 5, 4, &[0, 0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = est(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = est(&[0.9, 0.1]);
        let expected = 0.5 * (25.0f64 / 9.0).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-12);
        let v = est(&[1.0, 0.0]);
        assert_eq!(kl_divergence(&v, &v).unwrap(), 0.0);
        // estimate with a zero where truth has mass is finite thanks to the floor
        assert!(kl_divergence(&p, &v).unwrap().is_finite());
    }

    #[test]
    fn bar_config_spelling() {
        #[derive(Deserialize, Serialize)]
        struct Probe {
            l: MetricBar,
            m: MetricBar,
            s: SurvivalBar,
            t: SurvivalBar,
        }
        let p: Probe = toml::from_str("l = 8.0\nm = \"min\"\ns = \"ave\"\nt = 0.2\n").unwrap();
        assert_eq!(p.l, MetricBar::Constant(8.0));
        assert_eq!(p.m, MetricBar::MinOfComputed);
        assert_eq!(p.s, SurvivalBar::AverageOfComputed);
        assert_eq!(p.t, SurvivalBar::Constant(0.2));
        assert!(toml::from_str::<Probe>("l = \"max\"\nm = 1.0\ns = \"ave\"\nt = 0.2\n").is_err());
        let back: Probe = toml::from_str(&toml::to_string(&p).unwrap()).unwrap();
        assert_eq!(back.m, MetricBar::MinOfComputed);
    }
}
