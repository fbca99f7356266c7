//! Every credit movement goes through the ledger: shop purchases feed the
//! reserve, black-market tax is burned, and the total never changes.
//!
//! cargo run --example economy_ledger

use anyhow::Result;
use mmo_sim::domain::{Ledger, SimTime, Uid};
use mmo_sim::economy::{Catalog, Category, Economy};
use mmo_sim::engine::RunConfig;

fn main() -> Result<()> {
    let catalog = Catalog::default();
    let mut config = RunConfig::builtin("default").expect("bundled");
    config.feature_flags.black_market_enabled = true;
    let params = config.initial_params(&catalog);
    let (alice, bob) = (Uid(0), Uid(1));
    let mut eco = Economy::new(Ledger::new([(alice, 5_000), (bob, 5_000)], 1_000_000));
    let t = SimTime::from_abs(0, 24);
    let total = eco.ledger.current_total();

    let gear = catalog.items.iter().find(|i| i.category == Category::Gear).expect("catalog has gear");
    let bought = eco.npc_buy(t, alice, gear.item_id, &catalog, &params)?;
    println!("{bought:?}");
    let instance = eco.inventory(alice)[0];
    let listing = eco.market_sell(t, alice, instance.id, 900, &catalog, params.flags)?;
    let trade = eco.market_buy(t, bob, listing.listing_id, params.tax_rate)?;
    println!("{trade:?}");

    println!(
        "alice {}  bob {}  reserve {}  burned {}",
        eco.balance(alice),
        eco.balance(bob),
        eco.ledger.reserve(),
        eco.ledger.burn()
    );
    assert_eq!(eco.ledger.current_total(), total);
    Ok(())
}
