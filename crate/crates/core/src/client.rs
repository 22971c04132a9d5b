//! Autonomous client agent: trains against its last received model, uploads
//! `(v, tau)`, adopts the reply, then moves on to fresh data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::datagen::{draw_client_round, ClientDraw, ClusterDistribution, MixtureSchedule};
use crate::error::{Error, Result};
use crate::estimation::{kl_divergence, WeightEstimate};
use crate::model::LossModel;
use crate::params::ParamVector;
use crate::server::{ClientId, ServerState};
use crate::train::{local_train, TrainConfig};

/// When a client feels like syncing again, measured in server epochs since
/// its last sync.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum UploadPolicy {
    /// Ready again immediately after every data refresh.
    EveryRefresh,
    /// Waits a uniform number of epochs in `[min_delay, max_delay]`.
    RandomGap { min_delay: u64, max_delay: u64 },
}

impl UploadPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UploadPolicy::RandomGap { min_delay, max_delay } if min_delay > max_delay => Err(
                Error::InvalidConfig(format!("upload delay range [{min_delay}, {max_delay}] is empty")),
            ),
            _ => Ok(()),
        }
    }

    pub fn next_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            UploadPolicy::EveryRefresh => 0,
            UploadPolicy::RandomGap { min_delay, max_delay } => rng.random_range(min_delay..=max_delay),
        }
    }
}

/// One line of the run's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub epoch: u64,
    pub client_id: ClientId,
    /// How many syncs this client had completed before this one.
    pub round: usize,
    pub stale: bool,
    pub acc_before: f64,
    pub acc_after: f64,
    pub true_weights: WeightEstimate,
    pub est_weights: Option<WeightEstimate>,
    pub kl: Option<f64>,
}

/// A client's private stream of data draws.
#[derive(Debug, Clone)]
pub struct ClientDataStream {
    pub schedule: MixtureSchedule,
    pub dists: Vec<ClusterDistribution>,
    pub test_samples: usize,
    pub rng: ChaCha8Rng,
}

impl ClientDataStream {
    pub fn next_draw(&mut self) -> Result<ClientDraw> {
        draw_client_round(&self.schedule, &self.dists, self.test_samples, &mut self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    /// Local model `v`.
    pub model: ParamVector,
    /// Last received model `u`, the proximal anchor.
    pub anchor: ParamVector,
    /// Epoch of the last sync.
    pub last_sync: u64,
    pub dataset: LabeledDataset,
    pub test_set: LabeledDataset,
    pub true_weights: WeightEstimate,
    pub train_cfg: TrainConfig,
    pub rounds: usize,
}

impl ClientState {
    /// Joins through the server's initialization tuple `(u0, t)`.
    pub fn join(server: &mut ServerState, id: ClientId, draw: ClientDraw, train_cfg: TrainConfig) -> Result<Self> {
        let (u0, t) = server.handle_join(id)?;
        Ok(Self::from_model(id, u0, t, draw, train_cfg))
    }

    /// A client that starts from `model` at epoch `epoch` without talking
    /// to a server.
    pub fn from_model(id: ClientId, model: ParamVector, epoch: u64, draw: ClientDraw, train_cfg: TrainConfig) -> Self {
        Self {
            id,
            anchor: model.clone(),
            model,
            last_sync: epoch,
            dataset: draw.train,
            test_set: draw.test,
            true_weights: draw.weights,
            train_cfg,
            rounds: 0,
        }
    }

    /// Runs `steps` proximal-SGD steps on the current data, anchored at `u`.
    pub fn train_local<R: Rng + ?Sized>(&mut self, loss_model: &LossModel, steps: usize, rng: &mut R) -> Result<&ParamVector> {
        self.model = local_train(loss_model, &self.model, &self.anchor, &self.train_cfg, &self.dataset, steps, rng)?;
        Ok(&self.model)
    }

    /// Uploads `(v, tau)`, adopts the returned model, and reports accuracy
    /// of the uploaded and received models on the held-out test set.
    pub fn sync(&mut self, loss_model: &LossModel, server: &mut ServerState) -> Result<SyncRecord> {
        let acc_before = loss_model.accuracy(&self.model, &self.test_set)?;
        let out = server.handle_upload(self.id, &self.model, self.last_sync)?;
        let acc_after = loss_model.accuracy(&out.model, &self.test_set)?;
        let est = (!out.stale).then_some(out.weights);
        let kl = est.as_ref().map(|e| kl_divergence(&self.true_weights, e)).transpose()?;
        let record = SyncRecord {
            epoch: out.epoch,
            client_id: self.id,
            round: self.rounds,
            stale: out.stale,
            acc_before,
            acc_after,
            true_weights: self.true_weights.clone(),
            est_weights: est,
            kl,
        };
        self.adopt(out.model, out.epoch);
        Ok(record)
    }

    /// Makes `model` both the local model and the anchor, stamped `epoch`.
    pub fn adopt(&mut self, model: ParamVector, epoch: u64) {
        self.anchor = model.clone();
        self.model = model;
        self.last_sync = epoch;
        self.rounds += 1;
    }

    /// Replaces the training and test data with a fresh draw.
    pub fn refresh_data(&mut self, stream: &mut ClientDataStream) -> Result<()> {
        let draw = stream.next_draw()?;
        self.dataset = draw.train;
        self.test_set = draw.test;
        self.true_weights = draw.weights;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{EstimationConfig, MetricBar, RatioConfig, SurvivalBar};
    use crate::server::ServerConfig;
    use rand::SeedableRng;

    fn setup() -> (LossModel, ServerState, ClientDataStream, TrainConfig) {
        let model = LossModel::softmax_regression(2, 4);
        let dists = ClusterDistribution::family(2, 4, 1.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proxies = dists.iter().map(|d| d.sample(200, &mut rng).unwrap()).collect();
        let pretrained = vec![model.init_params(0.5, &mut rng), model.init_params(0.5, &mut rng)];
        let cfg = ServerConfig {
            staleness_threshold: 3,
            estimation: EstimationConfig {
                c1: 0.5,
                c2: 0.25,
                a_schedule: vec![5.0],
                l_bar: MetricBar::MinOfComputed,
                d1_bar: MetricBar::Constant(0.0),
                d2_bar: MetricBar::Constant(0.0),
            },
            ratios: RatioConfig { beta0: 0.025, beta1_bar: SurvivalBar::AverageOfComputed, a: 10.0, b: 5 },
        };
        let server = ServerState::new(cfg, pretrained, proxies, model.clone()).unwrap();
        let stream = ClientDataStream {
            schedule: MixtureSchedule { primary: 0, clusters: 2, share_min: 0.4, share_max: 0.9, samples_min: 50, samples_max: 80 },
            dists,
            test_samples: 40,
            rng: ChaCha8Rng::seed_from_u64(2),
        };
        let train = TrainConfig { learning_rate: 0.5, rho: 0.1, h_min: 2, h_max: 20, batch_size: None };
        (model, server, stream, train)
    }

    #[test]
    fn join_sync_cycle() {
        let (model, mut server, mut stream, train) = setup();
        let mut a = ClientState::join(&mut server, ClientId(0), stream.next_draw().unwrap(), train.clone()).unwrap();
        let b = ClientState::join(&mut server, ClientId(1), stream.next_draw().unwrap(), train).unwrap();
        assert_eq!(a.last_sync, 0);
        assert_eq!(a.model, b.model);
        let avg = crate::params::aggregate(&server.repository().models, &WeightEstimate::uniform(2)).unwrap();
        assert_eq!(a.model, avg);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        a.train_local(&model, 10, &mut rng).unwrap();
        assert_ne!(a.model, a.anchor);
        let rec = a.sync(&model, &mut server).unwrap();
        assert_eq!(rec.epoch, 1);
        assert_eq!(a.last_sync, server.epoch());
        assert_eq!(a.model, a.anchor);
        assert!(!rec.stale && rec.kl.is_some());
        a.refresh_data(&mut stream).unwrap();
        assert!((50..=80).contains(&a.dataset.len()));
    }

    #[test]
    fn stale_sync_still_returns_a_model() {
        let (model, mut server, mut stream, train) = setup();
        let mut a = ClientState::join(&mut server, ClientId(0), stream.next_draw().unwrap(), train.clone()).unwrap();
        let mut b = ClientState::join(&mut server, ClientId(1), stream.next_draw().unwrap(), train).unwrap();
        for _ in 0..4 {
            b.sync(&model, &mut server).unwrap();
        }
        let clusters_before = server.repository().models.clone();
        let rec = a.sync(&model, &mut server).unwrap();
        assert!(rec.stale);
        assert!(rec.est_weights.is_none() && rec.kl.is_none());
        assert_eq!(server.repository().models, clusters_before);
        let expected = crate::params::aggregate(&clusters_before, &WeightEstimate::uniform(2)).unwrap();
        assert_eq!(a.model, expected);
        assert_eq!(a.last_sync, 5);
    }

    #[test]
    fn larger_rho_keeps_model_closer_to_anchor() {
        let (model, mut server, mut stream, train) = setup();
        let base = ClientState::join(&mut server, ClientId(0), stream.next_draw().unwrap(), train).unwrap();
        let mut drifts = Vec::new();
        for rho in [0.0, 0.1, 10.0] {
            let mut c = base.clone();
            c.train_cfg.rho = rho;
            c.train_cfg.learning_rate = 0.05;
            c.train_local(&model, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            drifts.push(crate::params::l2_distance(&c.model, &c.anchor).unwrap());
        }
        assert!(drifts[0] > drifts[1] && drifts[1] > drifts[2], "{drifts:?}");
    }

    #[test]
    fn step_count_below_minimum_is_rejected() {
        let (model, mut server, mut stream, train) = setup();
        let mut c = ClientState::join(&mut server, ClientId(0), stream.next_draw().unwrap(), train).unwrap();
        assert!(c.train_local(&model, 1, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn upload_policy_delays() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(UploadPolicy::EveryRefresh.next_delay(&mut rng), 0);
        let p = UploadPolicy::RandomGap { min_delay: 3, max_delay: 7 };
        for _ in 0..50 {
            assert!((3..=7).contains(&p.next_delay(&mut rng)));
        }
        assert!(UploadPolicy::RandomGap { min_delay: 4, max_delay: 2 }.validate().is_err());
    }
}
