//! Binds half the population to a remote planner (a local stub server that
//! answers with the heuristic's greedy choice) and shows the outbound pool
//! never exceeds its cap.
//!
//! cargo run --release --example remote_policy

use std::time::Duration;

use anyhow::Result;
use mmo_sim::domain::{EventPayload, Uid};
use mmo_sim::engine::{PolicyKind, RunConfig, Simulation};
use mmo_sim::policy::StubPolicyServer;

fn main() -> Result<()> {
    let mut config = RunConfig::builtin("default").expect("bundled");
    config.total_days = 2;
    config.workers = 8;
    config.max_outbound_inflight = 4;
    let heuristic = Simulation::new(config.clone())?.heuristic().clone();
    let server = StubPolicyServer::greedy(heuristic, Duration::from_millis(2))?;
    for uid in (0..500).step_by(2) {
        config.policy_binding.bind_uid(
            Uid(uid),
            PolicyKind::Remote {
                endpoint: server.endpoint(),
                deadline_ms: 2_000,
            },
        );
    }
    let mut sim = Simulation::new(config.clone())?;
    let events = sim.advance(config.total_steps())?;
    let fallbacks = events.iter().filter(|e| matches!(e.payload, EventPayload::PolicyFailure { .. })).count();
    let pool = sim.pool();
    println!(
        "{} remote decisions, max in flight {} (cap {}), {fallbacks} fallbacks",
        pool.total_acquired(),
        pool.max_inflight_observed(),
        pool.capacity()
    );
    Ok(())
}
