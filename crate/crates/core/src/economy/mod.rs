//! Currency sinks and item flow: the NPC shop, the taxed black market and
//! legacy informal trading.
//!
//! `Economy` owns every balance and every item instance. NPC spending goes
//! to the system reserve (it can be paid out again as battle rewards); only
//! black-market tax leaves circulation, into the burn account.

mod catalog;
mod market;

pub use catalog::{Catalog, CatalogError, Category, Item};
pub use market::{Listing, ListingStatus, MarketBoard};

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Account, Credits, EventPayload, ItemId, ItemInstance, Ledger, LedgerError, ListingId,
    PlayerProfile, SimTime, TransferKind, Uid,
};
use crate::intervention::{FeatureFlags, LiveParams};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EconomyError {
    #[error("insufficient funds: balance {balance}, price {price}")]
    InsufficientFunds { balance: Credits, price: Credits },
    #[error("channel {0} is disabled")]
    ChannelDisabled(&'static str),
    #[error("unknown item {0:?}")]
    UnknownItem(ItemId),
    #[error("item instance {0} is not owned by the seller")]
    NotOwned(u64),
    #[error("item {0:?} is not tradable")]
    NotTradable(ItemId),
    #[error("listing {0:?} is not open")]
    ListingClosed(ListingId),
    #[error("unknown listing {0:?}")]
    UnknownListing(ListingId),
    #[error("buyer and seller are the same player")]
    SelfTrade,
    #[error("ask price must be positive")]
    ZeroPrice,
    #[error("no trade channel is enabled")]
    NoChannel,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Which trade channels are open, as seen by a planning agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub npc_shop: bool,
    pub black_market: bool,
    pub informal_trade: bool,
}

impl From<FeatureFlags> for Channels {
    fn from(f: FeatureFlags) -> Self {
        Channels {
            npc_shop: f.npc_shop_enabled,
            black_market: f.black_market_enabled,
            informal_trade: f.informal_trade_enabled,
        }
    }
}

impl Channels {
    pub fn can_sell(&self) -> bool {
        self.black_market || self.informal_trade
    }

    pub fn can_buy(&self) -> bool {
        self.npc_shop || self.black_market
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SellChannel {
    BlackMarket,
    Informal,
}

/// Tax on a black-market sale, rounded half up to whole credits.
///
/// The rate is first fixed to parts-per-million so the rounding is exact
/// integer arithmetic: a decimal rate such as 0.05 never picks up binary
/// floating-point error at the .5 boundary.
pub fn tax_for(price: Credits, tax_rate: f64) -> Credits {
    let ppm = (tax_rate * 1_000_000.0).round() as u128;
    ((price as u128 * ppm + 500_000) / 1_000_000) as Credits
}

/// Probability that a seller routes a sale through informal trading.
///
/// With both channels open a habitual seller keeps trading informally with
/// probability `habit * decay^days`, where `days` counts whole days since the
/// black market opened. A seller who has already been defrauded always uses
/// the official market once it exists.
pub fn informal_probability(
    profile: &PlayerProfile,
    channels: Channels,
    days_since_black_market: u32,
    fraud_victim: bool,
    habit_decay: f64,
) -> Result<f64, EconomyError> {
    match (channels.black_market, channels.informal_trade) {
        (false, false) => Err(EconomyError::NoChannel),
        (false, true) => Ok(1.0),
        (true, false) => Ok(0.0),
        (true, true) if fraud_victim => Ok(0.0),
        (true, true) => Ok(profile.habit_informal_trade * habit_decay.powi(days_since_black_market as i32)),
    }
}

pub fn choose_sell_channel(
    profile: &PlayerProfile,
    channels: Channels,
    days_since_black_market: u32,
    fraud_victim: bool,
    habit_decay: f64,
    rng: &mut dyn RngCore,
) -> Result<SellChannel, EconomyError> {
    let p = informal_probability(profile, channels, days_since_black_market, fraud_victim, habit_decay)?;
    // Draw only when both channels are open so single-channel worlds do not
    // consume randomness.
    let informal = if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random::<f64>() < p
    };
    Ok(if informal {
        SellChannel::Informal
    } else {
        SellChannel::BlackMarket
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Economy {
    pub ledger: Ledger,
    inventories: BTreeMap<Uid, Vec<ItemInstance>>,
    pub board: MarketBoard,
    next_instance: u64,
    created: u64,
    destroyed: u64,
}

impl Economy {
    pub fn new(ledger: Ledger) -> Self {
        let inventories = ledger.players().keys().map(|u| (*u, Vec::new())).collect();
        Economy {
            ledger,
            inventories,
            board: MarketBoard::default(),
            next_instance: 1,
            created: 0,
            destroyed: 0,
        }
    }

    pub fn balance(&self, uid: Uid) -> Credits {
        self.ledger.player(uid)
    }

    pub fn inventory(&self, uid: Uid) -> &[ItemInstance] {
        self.inventories.get(&uid).map_or(&[], Vec::as_slice)
    }

    pub fn owns(&self, uid: Uid, instance_id: u64) -> bool {
        self.inventory(uid).iter().any(|i| i.id == instance_id)
    }

    /// Creates a fresh item instance in `uid`'s inventory (shop stock, loot).
    pub fn mint(&mut self, uid: Uid, item: ItemId) -> ItemInstance {
        let inst = ItemInstance {
            id: self.next_instance,
            item,
        };
        self.next_instance += 1;
        self.created += 1;
        self.inventories.entry(uid).or_default().push(inst);
        inst
    }

    /// Removes an instance from play entirely (e.g. gear lost in a defeat).
    pub fn destroy(&mut self, uid: Uid, instance_id: u64) -> Result<ItemInstance, EconomyError> {
        let inst = self.take(uid, instance_id)?;
        self.destroyed += 1;
        Ok(inst)
    }

    fn take(&mut self, uid: Uid, instance_id: u64) -> Result<ItemInstance, EconomyError> {
        let inv = self.inventories.entry(uid).or_default();
        let pos = inv
            .iter()
            .position(|i| i.id == instance_id)
            .ok_or(EconomyError::NotOwned(instance_id))?;
        Ok(inv.remove(pos))
    }

    fn give(&mut self, uid: Uid, inst: ItemInstance) {
        self.inventories.entry(uid).or_default().push(inst);
    }

    pub fn npc_buy(
        &mut self,
        step: SimTime,
        uid: Uid,
        item_id: ItemId,
        catalog: &Catalog,
        params: &LiveParams,
    ) -> Result<EventPayload, EconomyError> {
        if !params.flags.npc_shop_enabled {
            return Err(EconomyError::ChannelDisabled("npc_shop"));
        }
        catalog.get(item_id).ok_or(EconomyError::UnknownItem(item_id))?;
        let price = *params
            .npc_prices
            .get(&item_id)
            .ok_or(EconomyError::UnknownItem(item_id))?;
        let balance = self.balance(uid);
        if balance < price {
            return Err(EconomyError::InsufficientFunds { balance, price });
        }
        self.ledger.transfer(
            step,
            Account::Player(uid),
            Account::SystemReserve,
            price,
            TransferKind::NpcPurchase,
        )?;
        let item = self.mint(uid, item_id);
        Ok(EventPayload::NpcPurchase { item, price })
    }

    /// Lists an owned item on the black market, moving it into escrow.
    pub fn market_sell(
        &mut self,
        step: SimTime,
        uid: Uid,
        instance_id: u64,
        ask_price: Credits,
        catalog: &Catalog,
        flags: FeatureFlags,
    ) -> Result<Listing, EconomyError> {
        if !flags.black_market_enabled {
            return Err(EconomyError::ChannelDisabled("black_market"));
        }
        if ask_price == 0 {
            return Err(EconomyError::ZeroPrice);
        }
        let inst = *self
            .inventory(uid)
            .iter()
            .find(|i| i.id == instance_id)
            .ok_or(EconomyError::NotOwned(instance_id))?;
        let item = catalog.get(inst.item).ok_or(EconomyError::UnknownItem(inst.item))?;
        if !item.tradable {
            return Err(EconomyError::NotTradable(inst.item));
        }
        let inst = self.take(uid, instance_id)?;
        Ok(self.board.open(uid, inst, ask_price, step.abs_step))
    }

    /// Withdraws an open listing and returns the item to its seller.
    pub fn market_cancel(&mut self, listing_id: ListingId) -> Result<Listing, EconomyError> {
        let listing = self.board.cancel(listing_id)?;
        self.give(listing.seller, listing.item);
        Ok(listing)
    }

    /// Buys a listing. The buyer pays the ask; the seller nets ask minus tax
    /// and the tax is burned.
    pub fn market_buy(
        &mut self,
        step: SimTime,
        buyer: Uid,
        listing_id: ListingId,
        tax_rate: f64,
    ) -> Result<EventPayload, EconomyError> {
        if !self.board.is_known(listing_id) {
            return Err(EconomyError::UnknownListing(listing_id));
        }
        let listing = self
            .board
            .get(listing_id)
            .ok_or(EconomyError::ListingClosed(listing_id))?
            .clone();
        if listing.seller == buyer {
            return Err(EconomyError::SelfTrade);
        }
        let price = listing.ask_price;
        let balance = self.balance(buyer);
        if balance < price {
            return Err(EconomyError::InsufficientFunds { balance, price });
        }
        let tax = tax_for(price, tax_rate);
        let proceeds = price - tax;
        if proceeds > 0 {
            self.ledger.transfer(
                step,
                Account::Player(buyer),
                Account::Player(listing.seller),
                proceeds,
                TransferKind::MarketTrade,
            )?;
        }
        if tax > 0 {
            self.ledger
                .transfer(step, Account::Player(buyer), Account::Burn, tax, TransferKind::Tax)?;
        }
        self.board.fill(listing_id)?;
        self.give(buyer, listing.item);
        Ok(EventPayload::TradeExecuted {
            listing_id,
            buyer,
            seller: listing.seller,
            item: listing.item,
            price,
            tax,
        })
    }

    /// Trust-based item hand-over from `u1` to `u2` for an untaxed side
    /// payment of `price`. With probability `p_fraud` the receiver keeps the
    /// item and pays nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn informal_trade(
        &mut self,
        step: SimTime,
        u1: Uid,
        u2: Uid,
        instance_id: u64,
        price: Credits,
        params: &LiveParams,
        rng: &mut dyn RngCore,
    ) -> Result<EventPayload, EconomyError> {
        if !params.flags.informal_trade_enabled {
            return Err(EconomyError::ChannelDisabled("informal_trade"));
        }
        if u1 == u2 {
            return Err(EconomyError::SelfTrade);
        }
        if !self.owns(u1, instance_id) {
            return Err(EconomyError::NotOwned(instance_id));
        }
        let balance = self.balance(u2);
        if balance < price {
            return Err(EconomyError::InsufficientFunds { balance, price });
        }
        let fraud = rng.random::<f64>() < params.p_fraud;
        let item = self.take(u1, instance_id)?;
        self.give(u2, item);
        let paid = if fraud { 0 } else { price };
        if paid > 0 {
            self.ledger.transfer(
                step,
                Account::Player(u2),
                Account::Player(u1),
                paid,
                TransferKind::InformalTrade,
            )?;
        }
        Ok(EventPayload::InformalTradeExecuted {
            u1,
            u2,
            item,
            fraud,
            price: paid,
        })
    }

    /// Cancels listings older than `ttl_steps`, returning items to sellers.
    pub fn expire_listings(&mut self, now: u64, ttl_steps: u64) -> Vec<Listing> {
        let stale: Vec<ListingId> = self
            .board
            .open_listings()
            .filter(|l| now >= l.created_step + ttl_steps)
            .map(|l| l.listing_id)
            .collect();
        stale
            .into_iter()
            .map(|id| self.market_cancel(id).expect("listing was open"))
            .collect()
    }

    pub fn items_created(&self) -> u64 {
        self.created
    }

    pub fn items_destroyed(&self) -> u64 {
        self.destroyed
    }

    /// Every minted instance is in an inventory, in escrow or destroyed.
    pub fn items_accounted(&self) -> bool {
        let held: u64 = self.inventories.values().map(|v| v.len() as u64).sum();
        let escrow = self.board.open_listings().count() as u64;
        held + escrow + self.destroyed == self.created
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ProfileClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step() -> SimTime {
        SimTime::from_abs(0, 24)
    }

    fn params() -> LiveParams {
        let catalog = Catalog::default();
        LiveParams {
            flags: FeatureFlags {
                npc_shop_enabled: true,
                black_market_enabled: true,
                informal_trade_enabled: true,
            },
            tax_rate: 0.05,
            p_fraud: 0.15,
            habit_decay: 0.7,
            lambda_win: 1.0,
            npc_prices: catalog.items.iter().map(|i| (i.item_id, i.npc_price)).collect(),
        }
    }

    fn economy(balances: &[(u32, Credits)]) -> Economy {
        Economy::new(Ledger::new(
            balances.iter().map(|(u, b)| (Uid(*u), *b)),
            1_000_000,
        ))
    }

    fn profile(habit: f64) -> PlayerProfile {
        PlayerProfile {
            uid: Uid(1),
            class: ProfileClass::Casual,
            skill: 0.5,
            frustration_tolerance: 0.5,
            spend_propensity: 0.5,
            activeness: 0.5,
            session_length_mean: 6,
            habit_informal_trade: habit,
        }
    }

    #[test]
    fn tax_matches_reference_rounding_table() {
        // (price, rate, tax) worked by hand with decimal arithmetic.
        let table: [(Credits, f64, Credits); 10] = [
            (100, 0.05, 5),
            (99, 0.05, 5),   // 4.95
            (90, 0.05, 5),   // 4.5 rounds up
            (89, 0.05, 4),   // 4.45
            (10, 0.15, 2),   // 1.5 rounds up
            (3, 0.5, 2),     // 1.5
            (1, 0.49, 0),    // 0.49
            (1_000, 0.0, 0),
            (7, 0.999_999, 7),
            (123_456, 0.075, 9_259), // 9259.2
        ];
        for (price, rate, expected) in table {
            assert_eq!(tax_for(price, rate), expected, "price {price} rate {rate}");
        }
    }

    #[test]
    fn npc_buy_moves_exact_price_to_reserve() {
        let catalog = Catalog::default();
        let p = params();
        let mut e = economy(&[(1, 450), (2, 449)]);
        let before = e.ledger.reserve();
        let ev = e.npc_buy(step(), Uid(1), ItemId(1), &catalog, &p).unwrap();
        assert!(matches!(ev, EventPayload::NpcPurchase { price: 450, .. }));
        assert_eq!(e.balance(Uid(1)), 0);
        assert_eq!(e.ledger.reserve(), before + 450);
        assert_eq!(e.inventory(Uid(1)).len(), 1);

        let snapshot = e.clone();
        assert_eq!(
            e.npc_buy(step(), Uid(2), ItemId(1), &catalog, &p),
            Err(EconomyError::InsufficientFunds {
                balance: 449,
                price: 450
            })
        );
        assert_eq!(e, snapshot);
        assert_eq!(
            e.npc_buy(step(), Uid(2), ItemId(99), &catalog, &p),
            Err(EconomyError::UnknownItem(ItemId(99)))
        );
        let mut closed = p.clone();
        closed.flags.npc_shop_enabled = false;
        assert_eq!(
            e.npc_buy(step(), Uid(2), ItemId(5), &catalog, &closed),
            Err(EconomyError::ChannelDisabled("npc_shop"))
        );
    }

    #[test]
    fn random_npc_purchases_balance_exactly() {
        let catalog = Catalog::default();
        let p = params();
        let mut e = economy(&[(1, 50_000), (2, 50_000), (3, 50_000)]);
        let reserve0 = e.ledger.reserve();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut debits = 0u128;
        for _ in 0..1000 {
            let uid = Uid(rng.random_range(1..=3));
            let item = ItemId(rng.random_range(1..=12));
            if let Ok(EventPayload::NpcPurchase { price, .. }) = e.npc_buy(step(), uid, item, &catalog, &p) {
                debits += price as u128;
            }
        }
        assert_eq!((e.ledger.reserve() - reserve0) as u128, debits);
        assert_eq!(150_000 - e.ledger.players_total(), debits);
        assert!(e.items_accounted());
    }

    #[test]
    fn sell_then_buy_applies_seller_side_tax() {
        let catalog = Catalog::default();
        let p = params();
        let mut e = economy(&[(1, 0), (2, 1_000)]);
        let inst = e.mint(Uid(1), ItemId(9));
        let listing = e
            .market_sell(step(), Uid(1), inst.id, 100, &catalog, p.flags)
            .unwrap();
        assert_eq!(listing.status, ListingStatus::Open);
        assert!(e.inventory(Uid(1)).is_empty(), "escrowed");
        assert!(e.items_accounted());

        assert_eq!(
            e.market_buy(step(), Uid(1), listing.listing_id, 0.05),
            Err(EconomyError::SelfTrade)
        );
        let ev = e.market_buy(step(), Uid(2), listing.listing_id, 0.05).unwrap();
        assert!(matches!(ev, EventPayload::TradeExecuted { price: 100, tax: 5, .. }));
        assert_eq!(e.balance(Uid(1)), 95);
        assert_eq!(e.balance(Uid(2)), 900);
        assert_eq!(e.ledger.burn(), 5);
        assert_eq!(e.inventory(Uid(2)), &[inst]);
        assert_eq!(
            e.market_buy(step(), Uid(2), listing.listing_id, 0.05),
            Err(EconomyError::ListingClosed(listing.listing_id))
        );
        assert!(e.items_accounted());
    }

    #[test]
    fn rounding_up_tax_and_zero_tax() {
        let catalog = Catalog::default();
        let p = params();
        let mut e = economy(&[(1, 0), (2, 1_000)]);
        let a = e.mint(Uid(1), ItemId(9));
        let b = e.mint(Uid(1), ItemId(10));
        let la = e.market_sell(step(), Uid(1), a.id, 99, &catalog, p.flags).unwrap();
        let lb = e.market_sell(step(), Uid(1), b.id, 200, &catalog, p.flags).unwrap();
        e.market_buy(step(), Uid(2), la.listing_id, 0.05).unwrap();
        assert_eq!((e.balance(Uid(1)), e.ledger.burn()), (94, 5));
        e.market_buy(step(), Uid(2), lb.listing_id, 0.0).unwrap();
        assert_eq!((e.balance(Uid(1)), e.ledger.burn()), (294, 5));
    }

    #[test]
    fn sell_gating_and_cancel() {
        let catalog = Catalog::default();
        let mut p = params();
        let mut e = economy(&[(1, 0)]);
        let inst = e.mint(Uid(1), ItemId(9));
        let stim = e.mint(Uid(1), ItemId(8));
        assert_eq!(
            e.market_sell(step(), Uid(1), stim.id, 10, &catalog, p.flags),
            Err(EconomyError::NotTradable(ItemId(8)))
        );
        assert_eq!(
            e.market_sell(step(), Uid(1), 999, 10, &catalog, p.flags),
            Err(EconomyError::NotOwned(999))
        );
        let l = e.market_sell(step(), Uid(1), inst.id, 10, &catalog, p.flags).unwrap();
        let cancelled = e.market_cancel(l.listing_id).unwrap();
        assert_eq!(cancelled.status, ListingStatus::Cancelled);
        assert!(e.owns(Uid(1), inst.id));
        p.flags.black_market_enabled = false;
        assert_eq!(
            e.market_sell(step(), Uid(1), inst.id, 10, &catalog, p.flags),
            Err(EconomyError::ChannelDisabled("black_market"))
        );
    }

    #[test]
    fn listings_expire_back_to_sellers() {
        let catalog = Catalog::default();
        let p = params();
        let mut e = economy(&[(1, 0)]);
        let inst = e.mint(Uid(1), ItemId(11));
        e.market_sell(SimTime::from_abs(10, 24), Uid(1), inst.id, 500, &catalog, p.flags)
            .unwrap();
        assert!(e.expire_listings(57, 48).is_empty());
        assert_eq!(e.expire_listings(58, 48).len(), 1);
        assert!(e.owns(Uid(1), inst.id));
    }

    #[test]
    fn informal_fraud_extremes() {
        let mut p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (p_fraud, expect_fraud) in [(0.0, false), (1.0, true)] {
            p.p_fraud = p_fraud;
            for _ in 0..200 {
                let mut e = economy(&[(1, 0), (2, 500)]);
                let inst = e.mint(Uid(1), ItemId(9));
                let ev = e
                    .informal_trade(step(), Uid(1), Uid(2), inst.id, 120, &p, &mut rng)
                    .unwrap();
                let EventPayload::InformalTradeExecuted { fraud, price, .. } = ev else {
                    panic!("wrong payload")
                };
                assert_eq!(fraud, expect_fraud);
                assert_eq!(price, if fraud { 0 } else { 120 });
                assert!(e.owns(Uid(2), inst.id), "item always reaches u2");
                assert_eq!(e.ledger.burn(), 0, "informal trades are never taxed");
            }
        }
    }

    #[test]
    fn informal_fraud_rate_monte_carlo() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut e = economy(&[(1, 0), (2, 0)]);
        let mut frauds = 0;
        let n = 10_000;
        for _ in 0..n {
            let inst = e.mint(Uid(1), ItemId(9));
            if let EventPayload::InformalTradeExecuted { fraud, .. } =
                e.informal_trade(step(), Uid(1), Uid(2), inst.id, 0, &p, &mut rng).unwrap()
            {
                frauds += fraud as u32;
            }
        }
        let share = frauds as f64 / n as f64;
        assert!((share - 0.15).abs() <= 0.011, "fraud share {share}");
    }

    #[test]
    fn informal_gating() {
        let mut p = params();
        p.flags.informal_trade_enabled = false;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = economy(&[(1, 0), (2, 0)]);
        let inst = e.mint(Uid(1), ItemId(9));
        assert_eq!(
            e.informal_trade(step(), Uid(1), Uid(2), inst.id, 0, &p, &mut rng),
            Err(EconomyError::ChannelDisabled("informal_trade"))
        );
        p.flags.informal_trade_enabled = true;
        assert_eq!(
            e.informal_trade(step(), Uid(2), Uid(1), inst.id, 0, &p, &mut rng),
            Err(EconomyError::NotOwned(inst.id))
        );
    }

    #[test]
    fn sell_channel_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let only_informal = Channels {
            npc_shop: true,
            black_market: false,
            informal_trade: true,
        };
        let both = Channels {
            black_market: true,
            ..only_informal
        };
        let none = Channels {
            npc_shop: true,
            black_market: false,
            informal_trade: false,
        };
        assert_eq!(
            choose_sell_channel(&profile(0.9), only_informal, 0, false, 0.7, &mut rng),
            Ok(SellChannel::Informal)
        );
        assert_eq!(
            choose_sell_channel(&profile(0.9), none, 0, false, 0.7, &mut rng),
            Err(EconomyError::NoChannel)
        );
        for _ in 0..1000 {
            assert_eq!(
                choose_sell_channel(&profile(0.0), both, 0, false, 0.7, &mut rng),
                Ok(SellChannel::BlackMarket)
            );
            assert_eq!(
                choose_sell_channel(&profile(1.0), both, 0, true, 1.0, &mut rng),
                Ok(SellChannel::BlackMarket),
                "fraud victims switch"
            );
        }
    }

    #[test]
    fn habit_decay_closed_form_and_monte_carlo() {
        let both = Channels {
            npc_shop: true,
            black_market: true,
            informal_trade: true,
        };
        let p = informal_probability(&profile(0.3), both, 5, false, 0.7).unwrap();
        assert!((p - 0.3 * 0.7f64.powi(5)).abs() < 1e-15);
        assert!((p - 0.0504).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                choose_sell_channel(&profile(0.3), both, 5, false, 0.7, &mut rng).unwrap()
                    == SellChannel::Informal
            })
            .count();
        let est = hits as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((est - p).abs() < 4.0 * sd, "estimate {est} vs {p}");
    }
}
