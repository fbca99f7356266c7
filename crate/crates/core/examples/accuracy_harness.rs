//! Exports one day of decisions, replays it, and scores the replay and a
//! majority-class baseline against it.
//!
//! cargo run --release --example accuracy_harness

use anyhow::Result;
use mmo_sim::analytics::{majority_predictions, stepwise_accuracy, Prediction};
use mmo_sim::datagen::{export_trajectories, replay_day, write_corpus};
use mmo_sim::engine::{RunConfig, Simulation};
use mmo_sim::persistence::{RunStore, StoredRun};

fn main() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path().join("run");
    let mut config = RunConfig::builtin("default").expect("bundled");
    config.total_days = 2;
    let mut sim = Simulation::new(config)?;
    RunStore::create(&dir, &sim)?.drive(&mut sim, u64::MAX)?;
    let run = StoredRun::open(&dir)?;

    let day = 1;
    let (header, truth) = export_trajectories(&run.view(), day)?;
    let corpus = tmp.path().join("day1.jsonl");
    write_corpus(&corpus, &header, &truth)?;
    println!("day {day}: {} decision points", truth.len());

    let (_, replayed) = replay_day(&run, day, &corpus)?;
    let preds: Vec<Prediction> = replayed.iter().map(Prediction::from).collect();
    let replay = stepwise_accuracy(&preds, &truth)?;
    println!("replay accuracy   {:.4}", replay.accuracy);

    let majority = stepwise_accuracy(&majority_predictions(&truth), &truth)?;
    println!("majority accuracy {:.4}", majority.accuracy);
    println!("class distribution {:?}", majority.class_distribution);
    println!("confusion (rows = recorded, cols = predicted)");
    for row in majority.confusion {
        println!("  {row:?}");
    }
    Ok(())
}
