//! Draws a population from the bundled cluster table.
//!
//! cargo run --example population -- 500

use anyhow::Result;
use mmo_sim::datagen::{class_counts, generate_population, ClusterTable};

fn main() -> Result<()> {
    let n: u32 = std::env::args().nth(1).map_or(Ok(500), |s| s.parse())?;
    let table = ClusterTable::default();
    let players = generate_population(&table, n, 42)?;
    for (class, count) in class_counts(&players) {
        let mix = table.get(class).mix_weight;
        println!("{:<18} {count:>4}  (mix weight {mix:.2})", format!("{class:?}"));
    }
    for p in players.iter().take(3) {
        println!("{}", serde_json::to_string(p)?);
    }
    Ok(())
}
