//! The informal-trading scenario: informal trades only until the black
//! market opens on day 4, then the share of informal trades collapses.
//!
//! cargo run --release --example black_market

use anyhow::Result;
use mmo_sim::analytics::{intervention_report, LogView};
use mmo_sim::engine::{RunConfig, Simulation};

fn main() -> Result<()> {
    let config = RunConfig::builtin("black_market").expect("bundled");
    let mut sim = Simulation::new(config.clone())?;
    let events = sim.advance(config.total_steps())?;
    let view = LogView::new(&config, &events, config.total_steps());
    let spd = config.steps_per_day as u64;
    // The scenario's only intervention has id 1.
    let report = intervention_report(&view, 1, spd, 2 * spd)?;

    let pct = |s: Option<f64>| s.map_or("n/a".into(), |s| format!("{:.1}%", s * 100.0));
    for d in &report.series {
        let marker = if d.day as u64 * spd == report.at_step { "  <- black market opens" } else { "" };
        println!(
            "day {}: informal {:>4}  market {:>4}  npc {:>4}  share {:>6}{marker}",
            d.day,
            d.counts.informal,
            d.counts.market,
            d.counts.npc,
            pct(d.share)
        );
    }
    println!("\nbefore (day before opening): {}", pct(report.pre.share));
    println!("after (two-day settle, then one day): {}", pct(report.post.share));
    Ok(())
}
