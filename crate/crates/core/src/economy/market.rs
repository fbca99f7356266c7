use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EconomyError;
use crate::domain::{Credits, ItemId, ItemInstance, ListingId, Uid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListingStatus {
    Open,
    Filled,
    Cancelled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Listing {
    pub listing_id: ListingId,
    pub seller: Uid,
    pub item: ItemInstance,
    pub ask_price: Credits,
    pub created_step: u64,
    pub status: ListingStatus,
}

/// Direct-listing purchase board. Buyers pick a listing; there is no
/// matching engine. Closed listings are dropped from the board.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketBoard {
    next_id: u64,
    open: BTreeMap<ListingId, Listing>,
    filled: u64,
    cancelled: u64,
}

impl MarketBoard {
    pub(super) fn open(&mut self, seller: Uid, item: ItemInstance, ask_price: Credits, created_step: u64) -> Listing {
        self.next_id += 1;
        let listing = Listing {
            listing_id: ListingId(self.next_id),
            seller,
            item,
            ask_price,
            created_step,
            status: ListingStatus::Open,
        };
        self.open.insert(listing.listing_id, listing.clone());
        listing
    }

    pub(super) fn fill(&mut self, id: ListingId) -> Result<Listing, EconomyError> {
        let mut l = self.open.remove(&id).ok_or(EconomyError::ListingClosed(id))?;
        l.status = ListingStatus::Filled;
        self.filled += 1;
        Ok(l)
    }

    pub(super) fn cancel(&mut self, id: ListingId) -> Result<Listing, EconomyError> {
        let mut l = self.open.remove(&id).ok_or(EconomyError::ListingClosed(id))?;
        l.status = ListingStatus::Cancelled;
        self.cancelled += 1;
        Ok(l)
    }

    /// Open listings only; a listing that has been filled or cancelled is
    /// reported as closed by the economy.
    pub fn get(&self, id: ListingId) -> Option<&Listing> {
        self.open.get(&id)
    }

    pub fn is_known(&self, id: ListingId) -> bool {
        id.0 >= 1 && id.0 <= self.next_id
    }

    pub fn open_listings(&self) -> impl Iterator<Item = &Listing> {
        self.open.values()
    }

    /// Cheapest open listing for `item`, oldest first among equal prices,
    /// skipping the buyer's own listings.
    pub fn cheapest(&self, item: ItemId, buyer: Uid) -> Option<&Listing> {
        self.open
            .values()
            .filter(|l| l.item.item == item && l.seller != buyer)
            .min_by_key(|l| (l.ask_price, l.created_step, l.listing_id))
    }

    pub fn filled_count(&self) -> u64 {
        self.filled
    }

    pub fn cancelled_count(&self) -> u64 {
        self.cancelled
    }
}
