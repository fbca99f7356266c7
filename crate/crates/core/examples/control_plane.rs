//! Drives a run through the control plane: start, pause, single-step, a
//! live intervention, and read queries. Pass `--serve` to keep serving the
//! HTTP API on 127.0.0.1:8080 afterwards.
//!
//! cargo run --release --example control_plane -- --serve

use std::time::Duration;

use anyhow::Result;
use mmo_sim::api::{self, ControlPlane, CreateRun, RunControlCommand};
use mmo_sim::intervention::{InterventionKind, InterventionRequest};

fn main() -> Result<()> {
    let cp = ControlPlane::new(None);
    let id = cp.create(CreateRun {
        builtin: Some("default".into()),
        ..Default::default()
    })?;
    let run = cp.get(&id)?;
    run.control(RunControlCommand::Start)?;
    run.wait_for_step(30, Duration::from_secs(30));
    run.control(RunControlCommand::Pause)?;
    let at = run.committed_steps();
    println!("paused at step {at}");

    let scheduled = run.intervene(InterventionRequest {
        at_step: None,
        kind: InterventionKind::EnableFeature {
            name: "black_market_enabled".into(),
        },
        announce: true,
    })?;
    println!("black market opens at step {}", scheduled.at_step);
    run.control(RunControlCommand::StepN { n: 24 })?;
    run.wait_for_step(at + 24, Duration::from_secs(30));

    let frame = run.stats(None, None)?;
    println!(
        "step {}: online {:.3}, gini {:.3}, informal share {:?}",
        frame.step, frame.activeness, frame.wealth_histogram.gini, frame.informal_trade_share.share
    );
    for (state, agents) in run.agents_by_state(None, None)?.agents {
        println!("  {state:?}: {}", agents.len());
    }
    let detail = run.agent_detail(mmo_sim::domain::Uid(0), None)?;
    println!("player 0: {:?}, balance {}, last rationale {:?}", detail.state, detail.balance, detail.latest_rationale);

    if std::env::args().any(|a| a == "--serve") {
        run.control(RunControlCommand::Resume)?;
        println!("serving on http://127.0.0.1:8080");
        tokio::runtime::Runtime::new()?.block_on(api::serve(cp.clone(), "127.0.0.1:8080".parse()?))?;
    }
    cp.shutdown();
    Ok(())
}
