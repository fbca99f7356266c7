//! Fits the battle model on one synthetic season and scores it on the next.
//!
//! cargo run --release --example battle_fit

use anyhow::Result;
use mmo_sim::battle::{evaluate_holdout, fit, predict_curve, FitOptions};
use mmo_sim::datagen::{generate_season_logs, ClusterTable, SeasonSpec};
use mmo_sim::domain::ProfileClass;

fn main() -> Result<()> {
    let table = ClusterTable::default();
    let logs = generate_season_logs(&table, &SeasonSpec::default())?;
    let opts = FitOptions::default();
    let model = fit(&logs.train, &opts)?;
    let report = evaluate_holdout(&model, &logs.holdout, opts.match_band, 1..=35)?;
    println!("train {} records, holdout {} records", logs.train.len(), logs.holdout.len());
    println!("class                win MAE  income err  min bin");
    for (class, r) in &report.per_class {
        println!(
            "{:<20} {:.4}   {:.4}      {}",
            format!("{class:?}"),
            r.win_mae,
            r.income_rel_err,
            r.min_bin_count
        );
    }

    // Same data scored against itself is refused.
    assert!(evaluate_holdout(&model, &logs.train, opts.match_band, 1..=35).is_err());

    println!("\nWealthElite curve");
    for p in predict_curve(&model, ProfileClass::WealthElite, 40)?.iter().step_by(5) {
        println!("  n={:>2}  p_win {:.3}  mean income {:.0}", p.n, p.p_win, p.mean_income);
    }
    Ok(())
}
