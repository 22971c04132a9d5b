//! Builds scenarios from TOML: the defaults, an estimation preset, and a
//! partial override file. Invalid files are reported with the failing key.
//!
//!     cargo run --example scenario_config

use cdfl::config::PRESETS;
use cdfl::ScenarioConfig;

fn main() -> cdfl::Result<()> {
    let base = ScenarioConfig::default();
    println!("default: K={} C={} M={} tau0={}", base.data.clusters, base.data.classes, base.clients(), base.staleness_threshold());

    for name in PRESETS {
        let cfg = base.clone().with_preset(name)?;
        let e = &cfg.estimation;
        println!("{name:>7}: c1={} c2={} A={:?}", e.c1, e.c2, e.a_schedule);
    }

    // Round-trip through text, then tweak one value.
    let mut text = base.to_toml_string()?;
    text = text.replace("beta0 = 0.025", "beta0 = 0.05");
    let tweaked = ScenarioConfig::from_toml_str(&text)?;
    println!("tweaked beta0 = {}", tweaked.ratios.beta0);

    match ScenarioConfig::from_toml_str("[ratios]\nbeta_zero = 1.0\n") {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
