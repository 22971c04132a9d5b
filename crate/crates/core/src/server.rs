//! The server state machine: epoch counter, staleness gate, cluster
//! repository updates and personalized aggregates.
//!
//! Every upload advances the epoch by one. Uploads whose staleness exceeds
//! the threshold leave the repository untouched and are answered with the
//! client's cached estimate; fresh uploads are scored against every cluster,
//! blended into the clusters they belong to, and answered with an aggregate
//! tailored to the new estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::estimation::{
    compute_update_ratios, estimate_distribution, raw_metrics, EstimationConfig, RatioConfig,
    RawMetrics, UpdateRatios, WeightEstimate,
};
use crate::model::LossModel;
use crate::params::{aggregate, ParamVector};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub usize);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    /// Uploads with `t - tau` above this are treated as deprecated.
    pub staleness_threshold: u64,
    pub estimation: EstimationConfig,
    pub ratios: RatioConfig,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.staleness_threshold == 0 {
            return Err(Error::InvalidConfig("staleness_threshold must be >= 1".into()));
        }
        self.estimation.validate()?;
        self.ratios.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRepository {
    pub models: Vec<ParamVector>,
    pub proxies: Vec<LabeledDataset>,
    pub last_update: Vec<u64>,
    pub loss_model: LossModel,
}

impl ClusterRepository {
    pub fn clusters(&self) -> usize {
        self.models.len()
    }
}

/// Protocol-level traffic and work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerCounters {
    pub uploads: u64,
    pub downloads: u64,
    pub proxy_loss_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ServerEvent {
    /// A stale upload arrived from a client with no cached estimate.
    UncachedStaleClient { client: ClientId, epoch: u64 },
}

/// What the server sends back for one upload.
#[derive(Debug, Clone)]
pub struct UploadOutcome {
    pub model: ParamVector,
    pub epoch: u64,
    pub stale: bool,
    /// The weights used to build `model`.
    pub weights: WeightEstimate,
    /// Present on the fresh branch only.
    pub metrics: Option<RawMetrics>,
    pub ratios: Option<UpdateRatios>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositorySnapshot {
    pub version: u32,
    pub epoch: u64,
    pub models: Vec<ParamVector>,
    pub last_update: Vec<u64>,
    pub cache: BTreeMap<ClientId, WeightEstimate>,
}

impl RepositorySnapshot {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let snap: Self = serde_json::from_slice(bytes)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Contract(format!("unsupported snapshot version {}", snap.version)));
        }
        Ok(snap)
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    epoch: u64,
    cfg: ServerConfig,
    repo: ClusterRepository,
    cache: BTreeMap<ClientId, WeightEstimate>,
    counters: ServerCounters,
    events: Vec<ServerEvent>,
}

impl ServerState {
    pub fn new(
        cfg: ServerConfig,
        pretrained: Vec<ParamVector>,
        proxies: Vec<LabeledDataset>,
        loss_model: LossModel,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = pretrained.len();
        if k < 2 {
            return Err(Error::Contract(format!("the server needs K >= 2 clusters, got {k}")));
        }
        if proxies.len() != k {
            return Err(Error::Contract(format!("{k} cluster models but {} proxy sets", proxies.len())));
        }
        for w in &pretrained {
            ensure_dim(loss_model.param_dim(), w.len())?;
        }
        Ok(Self {
            epoch: 0,
            cfg,
            repo: ClusterRepository {
                models: pretrained,
                proxies,
                last_update: vec![0; k],
                loss_model,
            },
            cache: BTreeMap::new(),
            counters: ServerCounters::default(),
            events: Vec::new(),
        })
    }

    /// Rebuilds a server from a snapshot plus the data that snapshots omit.
    pub fn restore(
        cfg: ServerConfig,
        snapshot: RepositorySnapshot,
        proxies: Vec<LabeledDataset>,
        loss_model: LossModel,
    ) -> Result<Self> {
        let mut s = Self::new(cfg, snapshot.models, proxies, loss_model)?;
        ensure_dim(s.repo.clusters(), snapshot.last_update.len())?;
        s.epoch = snapshot.epoch;
        s.repo.last_update = snapshot.last_update;
        s.cache = snapshot.cache;
        Ok(s)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn repository(&self) -> &ClusterRepository {
        &self.repo
    }

    pub fn counters(&self) -> ServerCounters {
        self.counters
    }

    pub fn events(&self) -> &[ServerEvent] {
        &self.events
    }

    pub fn cached_weights(&self, client: ClientId) -> Option<&WeightEstimate> {
        self.cache.get(&client)
    }

    pub fn snapshot(&self) -> RepositorySnapshot {
        RepositorySnapshot {
            version: SNAPSHOT_VERSION,
            epoch: self.epoch,
            models: self.repo.models.clone(),
            last_update: self.repo.last_update.clone(),
            cache: self.cache.clone(),
        }
    }

    /// Hands a newcomer the uniform average of the current cluster models
    /// and the current epoch. Does not consume an epoch.
    pub fn handle_join(&mut self, client: ClientId) -> Result<(ParamVector, u64)> {
        let k = self.repo.clusters();
        let uniform = WeightEstimate::uniform(k);
        let model = aggregate(&self.repo.models, &uniform)?;
        self.cache.insert(client, uniform);
        Ok((model, self.epoch))
    }

    /// Hands out every cluster model, as a client-side estimator needs.
    pub fn download_clusters(&mut self) -> Vec<ParamVector> {
        self.counters.downloads += self.repo.clusters() as u64;
        self.repo.models.clone()
    }

    /// Processes one upload `(v, tau)` with server-side estimation.
    pub fn handle_upload(&mut self, client: ClientId, v: &ParamVector, tau: u64) -> Result<UploadOutcome> {
        let outcome = self.process(client, v, tau, None)?;
        self.counters.downloads += 1;
        Ok(outcome)
    }

    /// Processes one upload whose mixture estimate was computed by the
    /// client. The returned model is informational: the caller is expected
    /// to build its own aggregate from downloaded clusters, so no download
    /// is counted.
    pub fn handle_upload_with_estimate(
        &mut self,
        client: ClientId,
        v: &ParamVector,
        tau: u64,
        estimate: WeightEstimate,
    ) -> Result<UploadOutcome> {
        ensure_dim(self.repo.clusters(), estimate.len())?;
        self.process(client, v, tau, Some(estimate))
    }

    fn process(
        &mut self,
        client: ClientId,
        v: &ParamVector,
        tau: u64,
        supplied: Option<WeightEstimate>,
    ) -> Result<UploadOutcome> {
        ensure_dim(self.repo.loss_model.param_dim(), v.len())?;
        if tau > self.epoch {
            return Err(Error::Contract(format!(
                "client {client} reports epoch {tau} but the server is at {}",
                self.epoch
            )));
        }
        self.epoch += 1;
        self.counters.uploads += 1;
        let t = self.epoch;

        if t - tau > self.cfg.staleness_threshold {
            let weights = match (supplied, self.cache.get(&client)) {
                (Some(w), _) => w,
                (None, Some(w)) => w.clone(),
                (None, None) => {
                    self.events.push(ServerEvent::UncachedStaleClient { client, epoch: t });
                    WeightEstimate::uniform(self.repo.clusters())
                }
            };
            let model = aggregate(&self.repo.models, &weights)?;
            return Ok(UploadOutcome { model, epoch: t, stale: true, weights, metrics: None, ratios: None });
        }

        let (weights, metrics) = match supplied {
            Some(w) => (w, None),
            None => {
                let m = raw_metrics(v, &self.repo.models, &self.repo.proxies, &self.repo.loss_model)?;
                self.counters.proxy_loss_evaluations += 2 * self.repo.clusters() as u64;
                (estimate_distribution(&m, &self.cfg.estimation)?, Some(m))
            }
        };
        let ratios = compute_update_ratios(&weights, &self.cfg.ratios, tau, t, &self.repo.last_update)?;
        for (w, &beta) in self.repo.models.iter_mut().zip(&ratios.ratios) {
            w.blend_toward(v, beta)?;
        }
        self.repo.last_update.clone_from(&ratios.last_update);
        self.cache.insert(client, weights.clone());
        let model = aggregate(&self.repo.models, &weights)?;
        Ok(UploadOutcome { model, epoch: t, stale: false, weights, metrics, ratios: Some(ratios) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{MetricBar, SurvivalBar};

    fn tiny_model() -> LossModel {
        // 1 input, 2 classes -> 4 parameters; tests below use 2-d vectors
        // through a dedicated model of the right size.
        LossModel::softmax_regression(1, 2)
    }

    fn proxy() -> LabeledDataset {
        LabeledDataset::new(vec![-1.0, 1.0], vec![0, 1], 1, 2).unwrap()
    }

    fn cfg(tau0: u64) -> ServerConfig {
        ServerConfig {
            staleness_threshold: tau0,
            estimation: EstimationConfig {
                c1: 0.5,
                c2: 0.25,
                a_schedule: vec![7.0],
                l_bar: MetricBar::Constant(0.0),
                d1_bar: MetricBar::Constant(0.0),
                d2_bar: MetricBar::Constant(0.0),
            },
            ratios: RatioConfig { beta0: 0.5, beta1_bar: SurvivalBar::AverageOfComputed, a: 10.0, b: 5 },
        }
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn server(models: Vec<ParamVector>, tau0: u64) -> ServerState {
        let k = models.len();
        ServerState::new(cfg(tau0), models, vec![proxy(); k], tiny_model()).unwrap()
    }

    #[test]
    fn init_and_join() {
        let s = server(vec![pv(&[0.0; 4]), pv(&[2.0; 4]), pv(&[1.0; 4]), pv(&[3.0; 4])], 10);
        assert_eq!(s.epoch(), 0);
        assert_eq!(s.repository().last_update, vec![0; 4]);

        let mut s = server(vec![pv(&[0.0; 4]), pv(&[2.0; 4])], 10);
        let (u, t) = s.handle_join(ClientId(3)).unwrap();
        assert_eq!(u.as_slice(), &[1.0; 4]);
        assert_eq!(t, 0);
        assert_eq!(s.epoch(), 0);
        assert_eq!(s.cached_weights(ClientId(3)).unwrap(), &WeightEstimate::uniform(2));
    }

    #[test]
    fn rejects_single_cluster() {
        assert!(ServerState::new(cfg(1), vec![pv(&[0.0; 4])], vec![proxy()], tiny_model()).is_err());
    }

    #[test]
    fn fresh_branch_matches_hand_evaluation() {
        // w = (0, 0), (4, 4) padded to the model's 4 parameters; v = (2, 2).
        // With estimate (1, 0): beta = (0.5, 0) after thresholding, so
        // w0 -> (1, 1), w1 unchanged, u = w0.
        let mut s = server(vec![pv(&[0.0; 4]), pv(&[4.0; 4])], 10);
        let out = s
            .handle_upload_with_estimate(ClientId(0), &pv(&[2.0; 4]), 0, WeightEstimate::vertex(2, 0))
            .unwrap();
        assert!(!out.stale);
        assert_eq!(out.ratios.unwrap().ratios, vec![0.5, 0.0]);
        assert_eq!(s.repository().models[0].as_slice(), &[1.0; 4]);
        assert_eq!(s.repository().models[1].as_slice(), &[4.0; 4]);
        assert_eq!(out.model.as_slice(), &[1.0; 4]);
        assert_eq!(s.repository().last_update, vec![1, 0]);
    }

    #[test]
    fn server_estimation_path_counts_and_caches() {
        let mut s = server(vec![pv(&[-1.0, 0.0, 1.0, 0.0]), pv(&[1.0, 0.0, -1.0, 0.0])], 10);
        let out = s.handle_upload(ClientId(1), &pv(&[-0.9, 0.0, 0.9, 0.0]), 0).unwrap();
        assert!(!out.stale);
        assert!(out.weights.weights()[0] > out.weights.weights()[1]);
        assert_eq!(s.cached_weights(ClientId(1)).unwrap(), &out.weights);
        assert_eq!(s.counters(), ServerCounters { uploads: 1, downloads: 1, proxy_loss_evaluations: 4 });
        let expected = aggregate(&s.repository().models, &out.weights).unwrap();
        assert_eq!(out.model, expected);
    }

    #[test]
    fn stale_branch_is_a_no_op() {
        let mut s = server(vec![pv(&[0.0; 4]), pv(&[4.0; 4])], 2);
        s.handle_join(ClientId(0)).unwrap();
        for _ in 0..3 {
            s.handle_upload(ClientId(9), &pv(&[1.0; 4]), s.epoch()).unwrap();
        }
        let before = s.snapshot().to_json_bytes().unwrap();
        // t becomes 4, tau = 0, gap 4 > 2
        let out = s.handle_upload(ClientId(0), &pv(&[100.0; 4]), 0).unwrap();
        assert!(out.stale);
        let mut after = s.snapshot();
        assert_eq!(after.epoch, 4);
        after.epoch = 3;
        assert_eq!(after.to_json_bytes().unwrap(), before);
        assert_eq!(out.weights, WeightEstimate::uniform(2));
    }

    #[test]
    fn stale_without_cache_falls_back_and_logs() {
        let mut s = server(vec![pv(&[0.0; 4]), pv(&[4.0; 4])], 1);
        for _ in 0..2 {
            s.handle_upload_with_estimate(ClientId(1), &pv(&[1.0; 4]), s.epoch(), WeightEstimate::uniform(2)).unwrap();
        }
        let out = s.handle_upload(ClientId(5), &pv(&[0.0; 4]), 0).unwrap();
        assert!(out.stale);
        assert_eq!(out.weights, WeightEstimate::uniform(2));
        assert_eq!(s.events(), &[ServerEvent::UncachedStaleClient { client: ClientId(5), epoch: 3 }]);
    }

    #[test]
    fn future_tau_and_bad_dimension_rejected() {
        let mut s = server(vec![pv(&[0.0; 4]), pv(&[4.0; 4])], 1);
        assert!(s.handle_upload(ClientId(0), &pv(&[0.0; 4]), 1).is_err());
        assert!(s.handle_upload(ClientId(0), &pv(&[0.0; 3]), 0).is_err());
        assert_eq!(s.epoch(), 0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = server(vec![pv(&[0.1, 0.2, 0.3, 0.4]), pv(&[4.0; 4])], 5);
        s.handle_upload(ClientId(2), &pv(&[1.0 / 3.0; 4]), 0).unwrap();
        let bytes = s.snapshot().to_json_bytes().unwrap();
        let snap = RepositorySnapshot::from_json_bytes(&bytes).unwrap();
        let restored = ServerState::restore(cfg(5), snap, vec![proxy(); 2], tiny_model()).unwrap();
        assert_eq!(restored.snapshot().to_json_bytes().unwrap(), bytes);
    }
}
