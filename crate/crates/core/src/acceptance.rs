//! The acceptance suite: directional claims checked on paired multi-seed
//! runs of the default scenario, plus exact protocol and numeric checks.
//!
//! Every criterion yields one [`CriterionOutcome`] with its own wall time.
//! The multi-seed runs are shared between the criteria that read them; their
//! cost is charged to the first one.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Method, ScenarioConfig};
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::estimation::{
    compute_update_ratios, estimate_distribution, staleness_factor, EstimationConfig, MetricBar, RatioConfig,
    RawMetrics, SurvivalBar, WeightEstimate,
};
use crate::harness::{compare_methods, CompareSummary, Environment, RunReport, SimulationPlan};
use crate::model::LossModel;
use crate::params::{aggregate, ParamVector};
use crate::server::{ClientId, ServerState};

/// Required lead of CDFL after-sync accuracy over Local, in accuracy units.
pub const COLLABORATION_MARGIN: f64 = 0.05;
/// Wall-clock budget for the shared multi-seed runs.
pub const RUNTIME_BUDGET_SECS: f64 = 600.0;
/// Slack allowed on the KL comparison, in nats.
pub const KL_SLACK: f64 = 0.05;
/// Sessions averaged for the before/after comparison.
pub const TAIL_SESSIONS: usize = 5;
pub const UNIT_TOLERANCE: f64 = 1e-9;
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const STALE_TRIALS: usize = 100;
pub const INVARIANT_TRIALS: usize = 10_000;
pub const GRADIENT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} [{}] {} ({:.1}s): {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AcceptanceReport {
    pub seeds: Vec<u64>,
    pub outcomes: Vec<CriterionOutcome>,
}

impl AcceptanceReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

impl fmt::Display for AcceptanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            writeln!(f, "{o}")?;
        }
        let passed = self.outcomes.iter().filter(|o| o.passed).count();
        write!(f, "{passed}/{} criteria passed", self.outcomes.len())
    }
}

#[derive(Debug, Clone)]
pub struct AcceptanceOptions {
    pub scenario: ScenarioConfig,
    pub seeds: Vec<u64>,
    /// When set, every shared run is written below this directory.
    pub out_dir: Option<PathBuf>,
}

impl Default for AcceptanceOptions {
    fn default() -> Self {
        Self { scenario: ScenarioConfig::default(), seeds: vec![1, 2, 3, 4, 5], out_dir: None }
    }
}

fn outcome(id: u32, title: &'static str, started: Instant, passed: bool, detail: String) -> CriterionOutcome {
    CriterionOutcome { id, title, passed, detail, seconds: started.elapsed().as_secs_f64() }
}

/// Runs every criterion in order. `on_outcome` sees each result as soon as
/// it is known.
pub fn run_acceptance(opts: &AcceptanceOptions, mut on_outcome: impl FnMut(&CriterionOutcome)) -> Result<AcceptanceReport> {
    let cfg = &opts.scenario;
    let mut outcomes = Vec::new();
    let mut push = |o: CriterionOutcome| {
        on_outcome(&o);
        outcomes.push(o);
    };

    let started = Instant::now();
    let summary = compare_methods(cfg, &opts.seeds)?;
    let shared_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        for method in Method::ALL {
            for r in summary.runs_for(method) {
                r.write_dir(&dir.join(format!("{method}-seed{}", r.seed)), cfg)?;
            }
        }
        std::fs::write(dir.join("summary.csv"), summary.to_csv())?;
    }
    push(collaboration_gain(&summary, started, shared_secs));
    push(update_gain(&summary));
    push(estimation_quality(&summary));
    push(overhead_ratio(&summary, cfg.data.clusters as u64));
    push(stale_no_op(cfg, opts.seeds[0])?);
    push(unit_fidelity()?);
    push(simplex_and_range()?);
    push(gradient_fidelity()?);
    push(convergence_trend(&summary));
    push(determinism(cfg, &summary)?);

    Ok(AcceptanceReport { seeds: opts.seeds.clone(), outcomes })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn collaboration_gain(s: &CompareSummary, started: Instant, shared_secs: f64) -> CriterionOutcome {
    let cdfl = s.runs_for(Method::Cdfl);
    let local = s.runs_for(Method::Local);
    let gain = mean(cdfl.iter().zip(local).map(|(c, l)| c.mean_acc_after() - l.mean_acc_after()));
    let passed = gain >= COLLABORATION_MARGIN && shared_secs <= RUNTIME_BUDGET_SECS;
    let detail = format!(
        "cdfl after {:.4}, local {:.4}, mean paired gain {:+.4} (need >= {COLLABORATION_MARGIN}); {} runs took {shared_secs:.1}s (budget {RUNTIME_BUDGET_SECS}s)",
        mean(cdfl.iter().map(RunReport::mean_acc_after)),
        mean(local.iter().map(RunReport::mean_acc_after)),
        gain,
        s.seeds.len() * Method::ALL.len(),
    );
    outcome(1, "collaboration gain", started, passed, detail)
}

fn update_gain(s: &CompareSummary) -> CriterionOutcome {
    let started = Instant::now();
    let diffs: Vec<f64> = s
        .runs_for(Method::Cdfl)
        .iter()
        .map(|r| {
            let (before, after) = r.tail_accuracy(TAIL_SESSIONS);
            after - before
        })
        .collect();
    let passed = diffs.iter().all(|d| *d >= 0.0);
    let list: Vec<String> = diffs.iter().map(|d| format!("{d:+.4}")).collect();
    let detail = format!("after - before over the last {TAIL_SESSIONS} sessions per seed: [{}]", list.join(", "));
    outcome(2, "update gain", started, passed, detail)
}

fn estimation_quality(s: &CompareSummary) -> CriterionOutcome {
    let started = Instant::now();
    let kl = |m| mean(s.runs_for(m).iter().map(|r| r.mean_kl().unwrap_or(f64::NAN)));
    let (cdfl, fedsoft) = (kl(Method::Cdfl), kl(Method::FedSoftAsync));
    let margin = fedsoft - cdfl;
    let passed = cdfl <= fedsoft + KL_SLACK;
    let detail = format!("mean KL cdfl {cdfl:.4}, fedsoft-async {fedsoft:.4}, margin {margin:+.4} (allowed slack {KL_SLACK})");
    outcome(3, "estimation quality", started, passed, detail)
}

fn overhead_ratio(s: &CompareSummary, k: u64) -> CriterionOutcome {
    let started = Instant::now();
    let mut problems = Vec::new();
    for r in s.runs_for(Method::Cdfl) {
        let t = r.totals;
        if t.downloads != t.syncs || t.client_loss_evaluations != 0 {
            problems.push(format!("cdfl seed {}: {} downloads, {} client evaluations over {} syncs", r.seed, t.downloads, t.client_loss_evaluations, t.syncs));
        }
    }
    for r in s.runs_for(Method::FedSoftAsync) {
        let t = r.totals;
        if t.downloads != k * t.syncs {
            problems.push(format!("fedsoft-async seed {}: {} downloads over {} syncs", r.seed, t.downloads, t.syncs));
        }
    }
    let detail = if problems.is_empty() {
        let fs = s.runs_for(Method::FedSoftAsync)[0].totals;
        let cd = s.runs_for(Method::Cdfl)[0].totals;
        format!(
            "downloads per sync: cdfl {}, fedsoft-async {}; cdfl client evaluations 0 (fedsoft-async {})",
            cd.downloads / cd.syncs,
            fs.downloads / fs.syncs,
            fs.client_loss_evaluations
        )
    } else {
        problems.join("; ")
    };
    outcome(4, "overhead ratio", started, problems.is_empty(), detail)
}

/// Repository state that a stale upload must leave untouched.
fn frozen_bytes(server: &ServerState) -> Result<Vec<u8>> {
    let mut snap = server.snapshot();
    snap.epoch = 0;
    snap.to_json_bytes()
}

fn stale_no_op(cfg: &ScenarioConfig, seed: u64) -> Result<CriterionOutcome> {
    let started = Instant::now();
    let env = Environment::build(cfg, seed)?;
    let mut server_cfg = cfg.server_config();
    server_cfg.staleness_threshold = 5;
    let tau0 = server_cfg.staleness_threshold;
    let mut server = ServerState::new(server_cfg, env.pretrained.clone(), env.proxies.clone(), cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let clients = 8;
    for m in 0..clients {
        server.handle_join(ClientId(m))?;
    }
    let perturbed = |rng: &mut ChaCha8Rng, base: &ParamVector| {
        let v: Vec<f64> = base.as_slice().iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
        ParamVector::new(v)
    };
    let mut failures = Vec::new();
    for trial in 0..STALE_TRIALS {
        // a few fresh uploads between trials keep the repository moving
        for _ in 0..rng.random_range(1..=3) {
            let k = rng.random_range(0..env.pretrained.len());
            let v = perturbed(&mut rng, &server.repository().models[k])?;
            server.handle_upload(ClientId(rng.random_range(0..clients)), &v, server.epoch())?;
        }
        while server.epoch() <= tau0 {
            let v = perturbed(&mut rng, &server.repository().models[0])?;
            server.handle_upload(ClientId(0), &v, server.epoch())?;
        }
        let client = ClientId(rng.random_range(0..clients));
        let cached = server.cached_weights(client).cloned().expect("joined clients are cached");
        let tau = rng.random_range(0..server.epoch() - tau0);
        let before = frozen_bytes(&server)?;
        let models_before = server.repository().models.clone();
        let v = ParamVector::new((0..models_before[0].len()).map(|_| rng.random_range(-5.0..5.0)).collect())?;
        let out = server.handle_upload(client, &v, tau)?;
        let expected = aggregate(&models_before, &cached)?;
        if !out.stale {
            failures.push(format!("trial {trial}: not treated as stale"));
        } else if frozen_bytes(&server)? != before {
            failures.push(format!("trial {trial}: repository changed"));
        } else if out.weights != cached || out.model != expected {
            failures.push(format!("trial {trial}: reply not built from cached weights"));
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        format!("{STALE_TRIALS} stale uploads left models, update epochs and cache bit-identical; replies used cached weights")
    } else {
        failures.join("; ")
    };
    Ok(outcome(5, "stale no-op", started, passed, detail))
}

fn unit_fidelity() -> Result<CriterionOutcome> {
    let started = Instant::now();
    let loss_only = EstimationConfig {
        c1: 1.0,
        c2: 0.0,
        a_schedule: vec![1.0],
        l_bar: MetricBar::Constant(0.0),
        d1_bar: MetricBar::Constant(0.0),
        d2_bar: MetricBar::Constant(0.0),
    };
    let metrics = RawMetrics { loss: vec![1.0, 3.0], loss_gap: vec![0.0; 2], distance: vec![0.0; 2] };
    let est = estimate_distribution(&metrics, &loss_only)?;
    let softmax_err = (est.weights()[0] - 0.622_459_331_201_854_6)
        .abs()
        .max((est.weights()[1] - 0.377_540_668_798_145_4).abs());

    let decay_err = (staleness_factor(10, 10.0, 5) - 1.0 / 101.0).abs();

    let ratio_cfg = RatioConfig { beta0: 0.025, beta1_bar: SurvivalBar::AverageOfComputed, a: 10.0, b: 5 };
    let r = compute_update_ratios(&WeightEstimate::new(vec![0.6, 0.3, 0.1])?, &ratio_cfg, 3, 4, &[1, 2, 3])?;
    let expected = [1.0, 0.0, 0.0];
    let bar_err = r.ratios.iter().zip(expected).map(|(b, e)| (b / ratio_cfg.beta0 - e).abs()).fold(0.0, f64::max);

    let worst = softmax_err.max(decay_err).max(bar_err);
    let detail = format!(
        "softmax case ({:.10}, {:.10}) err {softmax_err:.1e}; staleness 1/101 err {decay_err:.1e}; average-bar thresholding {:?} err {bar_err:.1e}",
        est.weights()[0],
        est.weights()[1],
        r.ratios.iter().map(|b| b / ratio_cfg.beta0).collect::<Vec<_>>()
    );
    Ok(outcome(6, "estimation unit fidelity", started, worst <= UNIT_TOLERANCE, detail))
}

fn random_bar(rng: &mut ChaCha8Rng) -> MetricBar {
    if rng.random_bool(0.5) {
        MetricBar::MinOfComputed
    } else {
        MetricBar::Constant(rng.random_range(0.0..3.0))
    }
}

fn simplex_and_range() -> Result<CriterionOutcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let mut worst_sum = 0.0f64;
    let mut worst_entry = 0.0f64;
    let mut out_of_range = 0usize;
    let beta0 = 0.025;
    for _ in 0..INVARIANT_TRIALS {
        let k = rng.random_range(2..=8);
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..k).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..scale) }).collect()
        };
        let metrics = RawMetrics { loss: draw(10.0), loss_gap: draw(5.0), distance: draw(20.0) };
        let c1 = rng.random_range(0.0..=1.0);
        let c2 = rng.random_range(0.0..=1.0 - c1);
        let cfg = EstimationConfig {
            c1,
            c2,
            a_schedule: (0..rng.random_range(1..=3)).map(|_| rng.random_range(0.1..40.0)).collect(),
            l_bar: random_bar(&mut rng),
            d1_bar: random_bar(&mut rng),
            d2_bar: random_bar(&mut rng),
        };
        let est = estimate_distribution(&metrics, &cfg)?;
        worst_sum = worst_sum.max((est.weights().iter().sum::<f64>() - 1.0).abs());
        for &w in est.weights() {
            worst_entry = worst_entry.max(-w).max(w - 1.0);
        }
        let t = rng.random_range(1..10_000u64);
        let tau = rng.random_range(0..=t);
        let last: Vec<u64> = (0..k).map(|_| rng.random_range(0..=t)).collect();
        let bar = if rng.random_bool(0.5) {
            SurvivalBar::AverageOfComputed
        } else {
            SurvivalBar::Constant(rng.random_range(0.0..0.6))
        };
        let ratio_cfg = RatioConfig { beta0, beta1_bar: bar, a: rng.random_range(0.1..20.0), b: rng.random_range(0..20) };
        let r = compute_update_ratios(&est, &ratio_cfg, tau, t, &last)?;
        out_of_range += r.ratios.iter().filter(|b| !(0.0..=beta0).contains(*b)).count();
    }
    let passed = worst_sum <= SIMPLEX_TOLERANCE && worst_entry <= SIMPLEX_TOLERANCE && out_of_range == 0;
    let detail = format!(
        "{INVARIANT_TRIALS} random inputs: max |sum - 1| {worst_sum:.1e}, max entry excursion {worst_entry:.1e}, ratios outside [0, beta0]: {out_of_range}"
    );
    Ok(outcome(7, "simplex and range invariants", started, passed, detail))
}

fn objective(model: &LossModel, v: &[f64], anchor: &[f64], rho: f64, data: &LabeledDataset) -> Result<f64> {
    let prox: f64 = v.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(model.empirical_loss(&ParamVector::new(v.to_vec())?, data)? + 0.5 * rho * prox)
}

fn gradient_error(model: &LossModel, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, c) = (model.input_dim, model.classes);
    let n = rng.random_range(5..=20);
    let features = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    let data = LabeledDataset::new(features, labels, d, c)?;
    let params = model.init_params(1.0, rng);
    let anchor = model.init_params(1.0, rng);
    let rho = rng.random_range(0.0..1.0);
    let analytic = model.proximal_gradient(&params, &anchor, rho, &data)?;
    let step = 1e-5;
    let mut v = params.as_slice().to_vec();
    let mut worst = 0.0f64;
    for i in 0..v.len() {
        let orig = v[i];
        v[i] = orig + step;
        let up = objective(model, &v, anchor.as_slice(), rho, &data)?;
        v[i] = orig - step;
        let down = objective(model, &v, anchor.as_slice(), rho, &data)?;
        v[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.as_slice()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
    }
    Ok(worst)
}

fn gradient_fidelity() -> Result<CriterionOutcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8_000);
    let mut worst_softmax = 0.0f64;
    let mut worst_mlp = 0.0f64;
    for _ in 0..GRADIENT_INSTANCES {
        let d = rng.random_range(1..=4);
        let c = rng.random_range(2..=5);
        let h = rng.random_range(2..=6);
        worst_softmax = worst_softmax.max(gradient_error(&LossModel::softmax_regression(d, c), &mut rng)?);
        worst_mlp = worst_mlp.max(gradient_error(&LossModel::two_layer_mlp(d, h, c), &mut rng)?);
    }
    let passed = worst_softmax < GRADIENT_TOLERANCE && worst_mlp < GRADIENT_TOLERANCE;
    let detail = format!(
        "{GRADIENT_INSTANCES} instances per architecture: max relative error softmax {worst_softmax:.2e}, mlp {worst_mlp:.2e}"
    );
    Ok(outcome(8, "gradient fidelity", started, passed, detail))
}

fn convergence_trend(s: &CompareSummary) -> CriterionOutcome {
    let started = Instant::now();
    let mut violations = Vec::new();
    let mut worst = f64::MIN;
    for r in s.runs_for(Method::Cdfl) {
        let thirds = r.loss_thirds();
        if thirds.is_empty() {
            violations.push(format!("seed {}: too few epochs", r.seed));
        }
        for (k, (first, last)) in thirds.iter().enumerate() {
            worst = worst.max(last - first);
            if last > first {
                violations.push(format!("seed {} cluster {k}: {first:.5} -> {last:.5}", r.seed));
            }
        }
    }
    let passed = violations.is_empty();
    let detail = if passed {
        format!("held-out loss never rose from the first to the last third; largest change {worst:+.5}")
    } else {
        format!("{} (seed, cluster) pairs rose, largest {worst:+.5}: {}", violations.len(), violations.join("; "))
    };
    outcome(9, "convergence trend", started, passed, detail)
}

fn determinism(cfg: &ScenarioConfig, s: &CompareSummary) -> Result<CriterionOutcome> {
    let started = Instant::now();
    let first = &s.runs_for(Method::Cdfl)[0];
    let again = crate::harness::run(&SimulationPlan::from_scenario(cfg, Method::Cdfl, first.seed), cfg)?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    first.write_uploads_csv(&mut a)?;
    again.write_uploads_csv(&mut b)?;
    let passed = a == b;
    let detail = format!(
        "seed {}: uploads.csv {} bytes, {}",
        first.seed,
        a.len(),
        if passed { "identical across two executions" } else { "differs between executions" }
    );
    Ok(outcome(10, "determinism", started, passed, detail))
}
