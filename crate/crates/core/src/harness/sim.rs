use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{EpochMetrics, RunReport, RunTotals};
use super::{client_side_estimate, derive_seed, SimulationPlan, Stream};
use crate::client::{ClientDataStream, ClientState, SyncRecord, UploadPolicy};
use crate::config::{Method, ScenarioConfig};
use crate::data::LabeledDataset;
use crate::datagen::{ClusterDistribution, MixtureSchedule};
use crate::error::{Error, Result};
use crate::estimation::{kl_divergence, WeightEstimate};
use crate::model::{Evaluation, LossModel};
use crate::params::{aggregate, ParamVector};
use crate::server::{ClientId, ServerState};

/// Everything a run needs before the first client joins: cluster
/// distributions, pretrained cluster models, proxy and held-out sets.
#[derive(Debug, Clone)]
pub struct Environment {
    pub dists: Vec<ClusterDistribution>,
    pub pretrained: Vec<ParamVector>,
    pub proxies: Vec<LabeledDataset>,
    pub heldout: Vec<LabeledDataset>,
}

impl Environment {
    pub fn build(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let dists = ClusterDistribution::family(d.clusters, d.classes, d.radius, d.sigma);
        let model = &cfg.model;
        // One shared initialization so cluster models start comparable.
        let init = model.init_params(cfg.pretrain.init_scale, &mut rng_for(seed, Stream::Init, 0));
        let pretrain_cfg = cfg.pretrain_train_config();
        let mut pretrained = Vec::with_capacity(d.clusters);
        let mut proxies = Vec::with_capacity(d.clusters);
        let mut heldout = Vec::with_capacity(d.clusters);
        for (k, dist) in dists.iter().enumerate() {
            let k64 = k as u64;
            let train = dist.sample(d.pretrain_samples, &mut rng_for(seed, Stream::PretrainData, k64))?;
            let w = crate::train::local_train(
                model,
                &init,
                &init,
                &pretrain_cfg,
                &train,
                cfg.pretrain.steps,
                &mut rng_for(seed, Stream::PretrainSgd, k64),
            )?;
            pretrained.push(w);
            proxies.push(dist.sample(d.proxy_samples, &mut rng_for(seed, Stream::Proxy, k64))?);
            heldout.push(dist.sample(d.heldout_samples, &mut rng_for(seed, Stream::Heldout, k64))?);
        }
        Ok(Self { dists, pretrained, proxies, heldout })
    }

    pub fn data_stream(&self, cfg: &ScenarioConfig, seed: u64, client: usize) -> ClientDataStream {
        let d = &cfg.data;
        ClientDataStream {
            schedule: MixtureSchedule {
                primary: client % d.clusters,
                clusters: d.clusters,
                share_min: d.primary_share_min,
                share_max: d.primary_share_max,
                samples_min: d.client_samples_min,
                samples_max: d.client_samples_max,
            },
            dists: self.dists.clone(),
            test_samples: d.client_test_samples,
            rng: rng_for(seed, Stream::ClientData, client as u64),
        }
    }
}

fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Accuracy of each cluster model on its own held-out data.
pub fn evaluate_cluster_accuracy(model: &LossModel, clusters: &[ParamVector], heldout: &[LabeledDataset]) -> Result<Vec<f64>> {
    Ok(evaluate_clusters(model, clusters, heldout)?.into_iter().map(|e| e.accuracy).collect())
}

fn evaluate_clusters(model: &LossModel, clusters: &[ParamVector], heldout: &[LabeledDataset]) -> Result<Vec<Evaluation>> {
    if clusters.len() != heldout.len() {
        return Err(Error::Contract(format!("{} clusters but {} held-out sets", clusters.len(), heldout.len())));
    }
    clusters.iter().zip(heldout).map(|(w, d)| model.evaluate(w, d)).collect()
}

/// Picks the next uploader uniformly among clients whose cool-down has
/// elapsed, advancing the logical clock when nobody is ready. The run ends
/// after `clients * syncs_per_client` uploads, so each client syncs that
/// many times on average and nobody drops out early.
struct Scheduler {
    rng: ChaCha8Rng,
    policy: UploadPolicy,
    ready_at: Vec<u64>,
    budget: usize,
    clock: u64,
}

impl Scheduler {
    fn new(plan: &SimulationPlan) -> Self {
        let mut rng = rng_for(plan.seed, Stream::Schedule, 0);
        let ready_at = (0..plan.clients).map(|_| plan.upload_policy.next_delay(&mut rng)).collect();
        Self {
            rng,
            policy: plan.upload_policy,
            ready_at,
            budget: plan.clients * plan.syncs_per_client,
            clock: 0,
        }
    }

    fn next(&mut self) -> Option<usize> {
        if self.budget == 0 {
            return None;
        }
        let earliest = *self.ready_at.iter().min()?;
        self.clock = self.clock.max(earliest);
        let ready: Vec<usize> = (0..self.ready_at.len()).filter(|&m| self.ready_at[m] <= self.clock).collect();
        Some(ready[self.rng.random_range(0..ready.len())])
    }

    fn finish(&mut self, m: usize) {
        self.clock += 1;
        self.budget -= 1;
        self.ready_at[m] = self.clock + self.policy.next_delay(&mut self.rng);
    }
}

struct Fleet {
    clients: Vec<ClientState>,
    streams: Vec<ClientDataStream>,
    train_rngs: Vec<ChaCha8Rng>,
}

impl Fleet {
    fn join(
        cfg: &ScenarioConfig,
        env: &Environment,
        plan: &SimulationPlan,
        mut join: impl FnMut(ClientId) -> Result<(ParamVector, u64)>,
    ) -> Result<Self> {
        let mut clients = Vec::with_capacity(plan.clients);
        let mut streams = Vec::with_capacity(plan.clients);
        let mut train_rngs = Vec::with_capacity(plan.clients);
        for m in 0..plan.clients {
            let mut stream = env.data_stream(cfg, plan.seed, m);
            let draw = stream.next_draw()?;
            let (u0, t) = join(ClientId(m))?;
            clients.push(ClientState::from_model(ClientId(m), u0, t, draw, cfg.train.clone()));
            streams.push(stream);
            train_rngs.push(rng_for(plan.seed, Stream::ClientTrain, m as u64));
        }
        Ok(Self { clients, streams, train_rngs })
    }

    fn train(&mut self, m: usize, model: &LossModel) -> Result<()> {
        let rng = &mut self.train_rngs[m];
        let steps = self.clients[m].train_cfg.draw_steps(rng);
        self.clients[m].train_local(model, steps, rng)?;
        Ok(())
    }
}

fn wrap(epoch: u64, client: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Simulation { epoch, client, source: Box::new(e) }
}

/// Runs whichever method the plan names.
pub fn run(plan: &SimulationPlan, cfg: &ScenarioConfig) -> Result<RunReport> {
    match plan.method {
        Method::Cdfl => run_simulation(plan, cfg),
        Method::FedSoftAsync => run_fedsoft_async(plan, cfg),
        Method::Local => run_local(plan, cfg),
    }
}

fn check_plan(plan: &SimulationPlan, expected: Method) -> Result<()> {
    if plan.method != expected {
        return Err(Error::Contract(format!("plan is for {}, not {expected}", plan.method)));
    }
    if plan.clients == 0 || plan.syncs_per_client == 0 {
        return Err(Error::InvalidConfig("plan needs at least one client and one sync".into()));
    }
    plan.upload_policy.validate()
}

/// Tracks per-cluster held-out metrics, re-evaluating only clusters that
/// changed since the last epoch.
struct ClusterTracker<'a> {
    model: &'a LossModel,
    heldout: &'a [LabeledDataset],
    current: Vec<Evaluation>,
    series: Vec<EpochMetrics>,
}

impl<'a> ClusterTracker<'a> {
    fn new(model: &'a LossModel, clusters: &[ParamVector], heldout: &'a [LabeledDataset]) -> Result<Self> {
        let current = evaluate_clusters(model, clusters, heldout)?;
        let mut t = Self { model, heldout, current, series: Vec::new() };
        t.push(0);
        Ok(t)
    }

    fn observe(&mut self, epoch: u64, clusters: &[ParamVector], changed: &[bool]) -> Result<()> {
        for (k, _) in changed.iter().enumerate().filter(|(_, c)| **c) {
            self.current[k] = self.model.evaluate(&clusters[k], &self.heldout[k])?;
        }
        self.push(epoch);
        Ok(())
    }

    fn push(&mut self, epoch: u64) {
        self.series.push(EpochMetrics {
            epoch,
            cluster_accuracy: self.current.iter().map(|e| e.accuracy).collect(),
            cluster_loss: self.current.iter().map(|e| e.loss).collect(),
        });
    }
}

/// The full protocol: server-side estimation, staleness-aware cluster
/// updates, personalized replies.
pub fn run_simulation(plan: &SimulationPlan, cfg: &ScenarioConfig) -> Result<RunReport> {
    check_plan(plan, Method::Cdfl)?;
    let env = Environment::build(cfg, plan.seed)?;
    let model = &cfg.model;
    let mut server_cfg = cfg.server_config();
    if cfg.server.staleness_threshold.is_none() {
        server_cfg.staleness_threshold = plan.clients as u64;
    }
    let mut server = ServerState::new(server_cfg, env.pretrained.clone(), env.proxies.clone(), model.clone())?;
    let mut fleet = Fleet::join(cfg, &env, plan, |id| server.handle_join(id))?;
    let mut tracker = ClusterTracker::new(model, &server.repository().models, &env.heldout)?;
    let mut sched = Scheduler::new(plan);
    let mut records = Vec::with_capacity(plan.clients * plan.syncs_per_client);

    while let Some(m) = sched.next() {
        let epoch = server.epoch() + 1;
        let mut step = || -> Result<SyncRecord> {
            fleet.train(m, model)?;
            fleet.clients[m].sync(model, &mut server)
        };
        let rec = step().map_err(wrap(epoch, m))?;
        let changed = match (rec.stale, server.repository().last_update.as_slice()) {
            (true, _) => vec![false; env.dists.len()],
            (false, last) => last.iter().map(|&e| e == rec.epoch).collect(),
        };
        tracker.observe(rec.epoch, &server.repository().models, &changed).map_err(wrap(epoch, m))?;
        records.push(rec);
        fleet.clients[m].refresh_data(&mut fleet.streams[m]).map_err(wrap(epoch, m))?;
        sched.finish(m);
    }

    let counters = server.counters();
    let totals = RunTotals {
        syncs: records.len() as u64,
        uploads: counters.uploads,
        downloads: counters.downloads,
        proxy_loss_evaluations: counters.proxy_loss_evaluations,
        client_loss_evaluations: 0,
    };
    Ok(RunReport::assemble(plan, env.dists.len(), records, tracker.series, totals, server.events().to_vec(), Some(server.snapshot())))
}

/// The soft-clustering baseline: clients download every cluster model,
/// estimate their own mixture by per-sample argmin loss, and upload the
/// estimate with their model.
pub fn run_fedsoft_async(plan: &SimulationPlan, cfg: &ScenarioConfig) -> Result<RunReport> {
    check_plan(plan, Method::FedSoftAsync)?;
    let env = Environment::build(cfg, plan.seed)?;
    let model = &cfg.model;
    let k = env.dists.len();
    let mut server_cfg = cfg.server_config();
    if cfg.server.staleness_threshold.is_none() {
        server_cfg.staleness_threshold = plan.clients as u64;
    }
    let mut server = ServerState::new(server_cfg, env.pretrained.clone(), env.proxies.clone(), model.clone())?;
    let mut fleet = Fleet::join(cfg, &env, plan, |id| server.handle_join(id))?;
    let mut tracker = ClusterTracker::new(model, &server.repository().models, &env.heldout)?;
    let mut sched = Scheduler::new(plan);
    let mut records = Vec::with_capacity(plan.clients * plan.syncs_per_client);
    let mut client_evals = 0u64;

    while let Some(m) = sched.next() {
        let epoch = server.epoch() + 1;
        let mut step = || -> Result<(SyncRecord, Vec<bool>)> {
            fleet.train(m, model)?;
            let client = &mut fleet.clients[m];
            let clusters = server.download_clusters();
            let est = client_side_estimate(model, &clusters, &client.dataset)?;
            client_evals += (k * client.dataset.len()) as u64;
            let acc_before = model.accuracy(&client.model, &client.test_set)?;
            let out = server.handle_upload_with_estimate(client.id, &client.model, client.last_sync, est.clone())?;
            let personalized = aggregate(&clusters, &est)?;
            let acc_after = model.accuracy(&personalized, &client.test_set)?;
            let kl = kl_divergence(&client.true_weights, &est)?;
            let changed = match &out.ratios {
                Some(r) => r.updated.clone(),
                None => vec![false; k],
            };
            let rec = SyncRecord {
                epoch: out.epoch,
                client_id: client.id,
                round: client.rounds,
                stale: out.stale,
                acc_before,
                acc_after,
                true_weights: client.true_weights.clone(),
                est_weights: Some(est),
                kl: Some(kl),
            };
            client.adopt(personalized, out.epoch);
            Ok((rec, changed))
        };
        let (rec, changed) = step().map_err(wrap(epoch, m))?;
        tracker.observe(rec.epoch, &server.repository().models, &changed).map_err(wrap(epoch, m))?;
        records.push(rec);
        fleet.clients[m].refresh_data(&mut fleet.streams[m]).map_err(wrap(epoch, m))?;
        sched.finish(m);
    }

    let counters = server.counters();
    let totals = RunTotals {
        syncs: records.len() as u64,
        uploads: counters.uploads,
        downloads: counters.downloads,
        proxy_loss_evaluations: counters.proxy_loss_evaluations,
        client_loss_evaluations: client_evals,
    };
    Ok(RunReport::assemble(plan, k, records, tracker.series, totals, server.events().to_vec(), Some(server.snapshot())))
}

/// Clients train on the same data schedule but never talk to a server.
/// They start from the uniform average of the pretrained clusters; each
/// round is anchored at the model the round started from.
pub fn run_local(plan: &SimulationPlan, cfg: &ScenarioConfig) -> Result<RunReport> {
    check_plan(plan, Method::Local)?;
    let env = Environment::build(cfg, plan.seed)?;
    let model = &cfg.model;
    let k = env.dists.len();
    let u0 = aggregate(&env.pretrained, &WeightEstimate::uniform(k))?;
    let mut fleet = Fleet::join(cfg, &env, plan, |_| Ok((u0.clone(), 0)))?;
    let mut sched = Scheduler::new(plan);
    let mut records = Vec::with_capacity(plan.clients * plan.syncs_per_client);
    let mut step_index = 0u64;

    while let Some(m) = sched.next() {
        step_index += 1;
        let mut step = || -> Result<SyncRecord> {
            fleet.clients[m].anchor = fleet.clients[m].model.clone();
            fleet.train(m, model)?;
            let client = &mut fleet.clients[m];
            let acc = model.accuracy(&client.model, &client.test_set)?;
            let rec = SyncRecord {
                epoch: step_index,
                client_id: client.id,
                round: client.rounds,
                stale: false,
                acc_before: acc,
                acc_after: acc,
                true_weights: client.true_weights.clone(),
                est_weights: None,
                kl: None,
            };
            let v = client.model.clone();
            client.adopt(v, step_index);
            Ok(rec)
        };
        let rec = step().map_err(wrap(step_index, m))?;
        records.push(rec);
        fleet.clients[m].refresh_data(&mut fleet.streams[m]).map_err(wrap(step_index, m))?;
        sched.finish(m);
    }

    let totals = RunTotals { syncs: records.len() as u64, ..RunTotals::default() };
    Ok(RunReport::assemble(plan, k, records, Vec::new(), totals, Vec::new(), None))
}
