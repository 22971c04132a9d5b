//! Turns raw server-side metrics into a mixture estimate and per-cluster
//! update ratios, printing each intermediate step.
//!
//!     cargo run --example estimate_weights

use cdfl::estimation::{compute_update_ratios, estimate_distribution, kl_divergence, RawMetrics};
use cdfl::{EstimationConfig, MetricBar, RatioConfig, SurvivalBar, WeightEstimate};

fn main() -> cdfl::Result<()> {
    // A client whose model fits clusters 0 and 1 and sits far from 3.
    let metrics = RawMetrics {
        loss: vec![0.6, 0.9, 2.4, 3.1],
        loss_gap: vec![0.1, 0.3, 1.8, 2.5],
        distance: vec![1.2, 1.5, 4.0, 5.2],
    };
    let truth = WeightEstimate::new(vec![0.55, 0.35, 0.1, 0.0])?;

    println!("{:>6} {:>10} {:>10}", "A", "estimate", "KL");
    for a in [1.0, 7.0, 25.0, 60.0] {
        let cfg = EstimationConfig {
            c1: 0.5,
            c2: 0.25,
            a_schedule: vec![a],
            l_bar: MetricBar::MinOfComputed,
            d1_bar: MetricBar::MinOfComputed,
            d2_bar: MetricBar::MinOfComputed,
        };
        let est = estimate_distribution(&metrics, &cfg)?;
        let shown: Vec<String> = est.weights().iter().map(|w| format!("{w:.3}")).collect();
        println!("{a:>6} {:>10} {:>10.4}", shown.join(" "), kl_divergence(&truth, &est)?);
    }

    let cfg = cdfl::ScenarioConfig::default().estimation;
    let est = estimate_distribution(&metrics, &cfg)?;
    let ratios = RatioConfig { beta0: 0.5, beta1_bar: SurvivalBar::AverageOfComputed, a: 10.0, b: 5 };
    let last_update = [3, 3, 3, 3];
    for (tau, t) in [(9, 10), (2, 10)] {
        let r = compute_update_ratios(&est, &ratios, tau, t, &last_update)?;
        println!("upload tau={tau} at t={t}: ratios {:?} updated {:?}", r.ratios, r.updated);
    }
    Ok(())
}
