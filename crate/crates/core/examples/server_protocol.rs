//! Drives a server by hand: clients join, train locally, upload fresh and
//! stale models, and the repository snapshot survives a save/restore.
//!
//!     cargo run --example server_protocol

use cdfl::datagen::{draw_client_round, ClusterDistribution, MixtureSchedule};
use cdfl::server::RepositorySnapshot;
use cdfl::{ClientId, ClientState, LossModel, ScenarioConfig, ServerState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cdfl::Result<()> {
    let cfg = ScenarioConfig::default();
    let d = &cfg.data;
    let model = LossModel::softmax_regression(2, d.classes);
    let dists = ClusterDistribution::family(d.clusters, d.classes, d.radius, d.sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // A repository of weak cluster models, one per distribution.
    let mut pretrained = Vec::new();
    let mut proxies = Vec::new();
    let init = model.init_params(cfg.pretrain.init_scale, &mut rng);
    for dist in &dists {
        let data = dist.sample(d.pretrain_samples, &mut rng)?;
        let w = cdfl::local_train(&model, &init, &init, &cfg.pretrain_train_config(), &data, cfg.pretrain.steps, &mut rng)?;
        pretrained.push(w);
        proxies.push(dist.sample(d.proxy_samples, &mut rng)?);
    }
    let mut server_cfg = cfg.server_config();
    server_cfg.staleness_threshold = 3;
    let mut server = ServerState::new(server_cfg.clone(), pretrained, proxies.clone(), model.clone())?;

    let mut clients = Vec::new();
    for id in 0..4 {
        let sched = MixtureSchedule {
            primary: id % d.clusters,
            clusters: d.clusters,
            share_min: d.primary_share_min,
            share_max: d.primary_share_max,
            samples_min: d.client_samples_min,
            samples_max: d.client_samples_max,
        };
        let draw = draw_client_round(&sched, &dists, d.client_test_samples, &mut rng)?;
        clients.push(ClientState::join(&mut server, ClientId(id), draw, cfg.train.clone())?);
    }

    // Clients 0..3 sync in turn; client 3 holds on to epoch 0 and goes stale.
    for round in 0..2 {
        for c in clients.iter_mut().take(3) {
            c.train_local(&model, 30, &mut rng)?;
            let rec = c.sync(&model, &mut server)?;
            let est: Vec<String> = rec
                .est_weights
                .as_ref()
                .map(|w| w.weights().iter().map(|x| format!("{x:.2}")).collect())
                .unwrap_or_default();
            println!(
                "round {round} epoch {} client {}: acc {:.3} -> {:.3}, estimate [{}] truth {:?}",
                rec.epoch, rec.client_id, rec.acc_before, rec.acc_after, est.join(" "),
                rec.true_weights.weights().iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
    let before = server.snapshot();
    let late = &mut clients[3];
    late.train_local(&model, 30, &mut rng)?;
    let rec = late.sync(&model, &mut server)?;
    println!("client 3 uploads at epoch {} with tau 0: stale = {}", rec.epoch, rec.stale);
    assert_eq!(server.snapshot().models, before.models);

    // Snapshots are plain JSON; proxies and the loss model are supplied again.
    let bytes = server.snapshot().to_json_bytes()?;
    let restored = ServerState::restore(server_cfg, RepositorySnapshot::from_json_bytes(&bytes)?, proxies, model)?;
    println!("restored at epoch {}, last updates {:?}", restored.epoch(), restored.repository().last_update);
    println!("counters: {:?}", server.counters());
    Ok(())
}
