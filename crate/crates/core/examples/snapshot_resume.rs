//! Persists a run, simulates a crash that leaves a torn log tail, resumes
//! from the last snapshot and checks the log matches an uninterrupted run.
//!
//! cargo run --release --example snapshot_resume

use std::io::Write;

use anyhow::Result;
use mmo_sim::engine::{RunConfig, Simulation};
use mmo_sim::persistence::{read_log, RunStore, StoredRun, LOG_FILE};

fn main() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let mut config = RunConfig::builtin("default").expect("bundled");
    config.total_days = 3;

    let straight = tmp.path().join("straight");
    let mut sim = Simulation::new(config.clone())?;
    RunStore::create(&straight, &sim)?.drive(&mut sim, u64::MAX)?;
    let want = read_log(&straight.join(LOG_FILE))?.content_hash();

    let crashed = tmp.path().join("crashed");
    let mut sim = Simulation::new(config)?;
    let mut store = RunStore::create(&crashed, &sim)?;
    store.drive(&mut sim, 40)?;
    drop(store);
    std::fs::OpenOptions::new()
        .append(true)
        .open(crashed.join(LOG_FILE))?
        .write_all(b"{\"seq\":123456,\"step\":{\"da")?;
    let before = read_log(&crashed.join(LOG_FILE))?;
    println!(
        "after crash: {} committed steps, {} torn bytes",
        before.committed_steps, before.uncommitted_bytes
    );

    let (mut store, mut sim) = RunStore::resume(&crashed, None)?;
    println!("resumed from the snapshot at step {}", sim.now());
    store.drive(&mut sim, u64::MAX)?;
    let got = StoredRun::open(&crashed)?.log.content_hash();
    println!("uninterrupted {}\nresumed       {}", want, got);
    assert_eq!(want, got);
    Ok(())
}
