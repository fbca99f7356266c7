use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Account, Credits, SimTime, Transfer, TransferKind, Uid};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("transfer amount must be positive")]
    ZeroAmount,
    #[error("transfer from an account to itself")]
    SelfTransfer,
    #[error("{0:?} transfers must follow their account rules")]
    KindMismatch(TransferKind),
    #[error("unknown account {0:?}")]
    UnknownAccount(Account),
    #[error("insufficient funds in {account:?}: balance {balance}, needed {needed}")]
    InsufficientFunds {
        account: Account,
        balance: Credits,
        needed: Credits,
    },
    #[error("burned currency cannot be spent")]
    BurnIsTerminal,
}

/// Double-entry currency ledger. Every transfer debits one account and
/// credits another by the same amount, so the total never changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    players: BTreeMap<Uid, Credits>,
    reserve: Credits,
    burn: Credits,
    total: u128,
    next_seq: u64,
    totals_by_kind: BTreeMap<TransferKind, u128>,
}

impl Ledger {
    pub fn new(players: impl IntoIterator<Item = (Uid, Credits)>, reserve: Credits) -> Self {
        let players: BTreeMap<Uid, Credits> = players.into_iter().collect();
        let total = players.values().map(|&b| b as u128).sum::<u128>() + reserve as u128;
        Ledger {
            players,
            reserve,
            burn: 0,
            total,
            next_seq: 1,
            totals_by_kind: BTreeMap::new(),
        }
    }

    pub fn balance(&self, account: Account) -> Option<Credits> {
        match account {
            Account::Player(uid) => self.players.get(&uid).copied(),
            Account::SystemReserve => Some(self.reserve),
            Account::Burn => Some(self.burn),
        }
    }

    pub fn player(&self, uid: Uid) -> Credits {
        self.players.get(&uid).copied().unwrap_or(0)
    }

    pub fn players(&self) -> &BTreeMap<Uid, Credits> {
        &self.players
    }

    pub fn reserve(&self) -> Credits {
        self.reserve
    }

    pub fn burn(&self) -> Credits {
        self.burn
    }

    pub fn players_total(&self) -> u128 {
        self.players.values().map(|&b| b as u128).sum()
    }

    /// Total currency fixed at construction.
    pub fn initial_total(&self) -> u128 {
        self.total
    }

    /// Sum of all balances; equals `initial_total` unless the ledger is broken.
    pub fn current_total(&self) -> u128 {
        self.players_total() + self.reserve as u128 + self.burn as u128
    }

    pub fn total_of_kind(&self, kind: TransferKind) -> u128 {
        self.totals_by_kind.get(&kind).copied().unwrap_or(0)
    }

    pub fn transfer(
        &mut self,
        step: SimTime,
        from: Account,
        to: Account,
        amount: Credits,
        kind: TransferKind,
    ) -> Result<Transfer, LedgerError> {
        if amount == 0 {
            return Err(LedgerError::ZeroAmount);
        }
        if from == to {
            return Err(LedgerError::SelfTransfer);
        }
        let kind_ok = match kind {
            TransferKind::BattleReward => from == Account::SystemReserve,
            TransferKind::Tax => to == Account::Burn,
            TransferKind::NpcPurchase => to == Account::SystemReserve,
            TransferKind::MarketTrade | TransferKind::InformalTrade => {
                matches!((from, to), (Account::Player(_), Account::Player(_)))
            }
            TransferKind::Adjustment => true,
        };
        if !kind_ok {
            return Err(LedgerError::KindMismatch(kind));
        }
        if from == Account::Burn {
            return Err(LedgerError::BurnIsTerminal);
        }
        let balance = self
            .balance(from)
            .ok_or(LedgerError::UnknownAccount(from))?;
        if self.balance(to).is_none() {
            return Err(LedgerError::UnknownAccount(to));
        }
        if balance < amount {
            return Err(LedgerError::InsufficientFunds {
                account: from,
                balance,
                needed: amount,
            });
        }
        *self.slot(from) -= amount;
        *self.slot(to) += amount;
        *self.totals_by_kind.entry(kind).or_default() += amount as u128;
        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(Transfer {
            seq,
            step,
            from,
            to,
            amount,
            kind,
        })
    }

    fn slot(&mut self, account: Account) -> &mut Credits {
        match account {
            Account::Player(uid) => self.players.get_mut(&uid).expect("checked above"),
            Account::SystemReserve => &mut self.reserve,
            Account::Burn => &mut self.burn,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t0() -> SimTime {
        SimTime::from_abs(0, 24)
    }

    fn ledger() -> Ledger {
        Ledger::new([(Uid(1), 100), (Uid(2), 50)], 1_000)
    }

    #[test]
    fn rejects_malformed_transfers() {
        let mut l = ledger();
        let p1 = Account::Player(Uid(1));
        assert_eq!(
            l.transfer(t0(), p1, Account::Burn, 0, TransferKind::Tax),
            Err(LedgerError::ZeroAmount)
        );
        assert_eq!(
            l.transfer(t0(), p1, p1, 5, TransferKind::Adjustment),
            Err(LedgerError::SelfTransfer)
        );
        assert_eq!(
            l.transfer(t0(), p1, Account::Player(Uid(2)), 5, TransferKind::BattleReward),
            Err(LedgerError::KindMismatch(TransferKind::BattleReward))
        );
        assert_eq!(
            l.transfer(t0(), p1, Account::SystemReserve, 5, TransferKind::Tax),
            Err(LedgerError::KindMismatch(TransferKind::Tax))
        );
        assert!(matches!(
            l.transfer(t0(), p1, Account::SystemReserve, 101, TransferKind::NpcPurchase),
            Err(LedgerError::InsufficientFunds { .. })
        ));
        assert_eq!(l, ledger());
    }

    #[test]
    fn seqs_are_monotone() {
        let mut l = ledger();
        let a = l
            .transfer(t0(), Account::SystemReserve, Account::Player(Uid(2)), 7, TransferKind::BattleReward)
            .unwrap();
        let b = l
            .transfer(t0(), Account::Player(Uid(2)), Account::Burn, 3, TransferKind::Tax)
            .unwrap();
        assert!(b.seq > a.seq);
        assert_eq!(l.player(Uid(2)), 54);
        assert_eq!(l.burn(), 3);
    }

    proptest! {
        #[test]
        fn random_transfers_conserve_the_total(ops in prop::collection::vec((0u8..4, 0u8..3, 1u64..200), 0..200)) {
            let mut l = ledger();
            let mut burn_seen = 0;
            for (kind, who, amount) in ops {
                let uid = Account::Player(Uid(1 + (who % 2) as u32));
                let other = Account::Player(Uid(2 - (who % 2) as u32));
                let (from, to, k) = match kind {
                    0 => (Account::SystemReserve, uid, TransferKind::BattleReward),
                    1 => (uid, Account::SystemReserve, TransferKind::NpcPurchase),
                    2 => (uid, Account::Burn, TransferKind::Tax),
                    _ => (uid, other, TransferKind::MarketTrade),
                };
                let _ = l.transfer(t0(), from, to, amount, k);
                prop_assert_eq!(l.current_total(), l.initial_total());
                prop_assert!(l.burn() >= burn_seen);
                burn_seen = l.burn();
            }
            prop_assert_eq!(l.burn() as u128, l.total_of_kind(TransferKind::Tax));
        }
    }
}
