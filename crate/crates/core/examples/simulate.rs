//! Runs a built-in config (or a TOML path) in memory and prints the daily
//! series and the in-session action mix per profile class.
//!
//! cargo run --release --example simulate -- default

use std::collections::BTreeMap;

use anyhow::Result;
use mmo_sim::analytics::{daily_series, LogView};
use mmo_sim::domain::{Action, AgentState, EventPayload, ProfileClass};
use mmo_sim::engine::{RunConfig, Simulation};

fn main() -> Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "default".into());
    let config = RunConfig::resolve(&name)?;
    let mut sim = Simulation::new(config.clone())?;
    let started = std::time::Instant::now();
    let events = sim.advance(config.total_steps())?;
    println!(
        "{}: {} players, {} steps, {} events in {:.2?}",
        config.run_id,
        sim.world().agents.len(),
        config.total_steps(),
        events.len(),
        started.elapsed()
    );

    let view = LogView::new(&config, &events, config.total_steps());
    println!("day  gini   online  informal  market  npc  share");
    for d in daily_series(&view)? {
        println!(
            "{:>3}  {:.3}  {:.3}   {:>8}  {:>6}  {:>3}  {}",
            d.day,
            d.gini,
            d.activeness,
            d.trades.informal,
            d.trades.market,
            d.trades.npc,
            d.informal_share.map_or("n/a".into(), |s| format!("{:.1}%", s * 100.0))
        );
    }

    let profiles = config.profiles()?;
    let mut by_class: BTreeMap<ProfileClass, [u64; 4]> = BTreeMap::new();
    for e in &events {
        if let (EventPayload::ActionChosen { action, state, .. }, Some(uid)) = (&e.payload, e.uid) {
            if *state != AgentState::Offline {
                by_class.entry(profiles[uid.0 as usize].class).or_default()[action.index()] += 1;
            }
        }
    }
    println!("\nin-session action shares");
    for (class, counts) in by_class {
        let total: u64 = counts.iter().sum();
        let shares: Vec<String> = Action::ALL
            .iter()
            .map(|a| format!("{a} {:.2}", counts[a.index()] as f64 / total.max(1) as f64))
            .collect();
        println!("  {:<18} {}", format!("{class:?}"), shares.join("  "));
    }
    Ok(())
}
