//! Shared vocabulary of the simulation: agent states, actions, player
//! profiles, currency accounts and the typed event stream.

mod ledger;

pub use ledger::{Ledger, LedgerError};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervention::InterventionKind;
use crate::messaging::Topic;

/// In-game credits. There are no fractional credits.
pub type Credits = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Uid(pub u32);

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Catalog identifier of an item type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

/// One physical copy of a catalog item. Instances are never duplicated; they
/// move between inventories and escrow or get destroyed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemInstance {
    pub id: u64,
    pub item: ItemId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ListingId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Offline,
    Battle,
    Buy,
    Sell,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Offline, Action::Battle, Action::Buy, Action::Sell];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Offline => "offline",
            Action::Battle => "battle",
            Action::Buy => "buy",
            Action::Sell => "sell",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline" => Ok(Action::Offline),
            "battle" => Ok(Action::Battle),
            "buy" => Ok(Action::Buy),
            "sell" => Ok(Action::Sell),
            other => Err(DomainError::UnknownAction(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentState {
    Offline,
    Online,
    Market,
    Battle,
}

impl AgentState {
    pub const ALL: [AgentState; 4] = [
        AgentState::Offline,
        AgentState::Online,
        AgentState::Market,
        AgentState::Battle,
    ];

    pub fn is_decision_point(self) -> bool {
        matches!(self, AgentState::Online | AgentState::Market)
    }
}

impl FromStr for AgentState {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "offline" => Ok(AgentState::Offline),
            "online" => Ok(AgentState::Online),
            "market" => Ok(AgentState::Market),
            "battle" => Ok(AgentState::Battle),
            other => Err(DomainError::UnknownState(other.to_string())),
        }
    }
}

/// The five player clusters, reported as I through V.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileClass {
    StableDevelopment,
    Novice,
    WealthElite,
    Casual,
    HighSkill,
}

impl ProfileClass {
    pub const ALL: [ProfileClass; 5] = [
        ProfileClass::StableDevelopment,
        ProfileClass::Novice,
        ProfileClass::WealthElite,
        ProfileClass::Casual,
        ProfileClass::HighSkill,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn roman(self) -> &'static str {
        ["I", "II", "III", "IV", "V"][self.index()]
    }
}

impl fmt::Display for ProfileClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for ProfileClass {
    type Err = DomainError;

    /// Accepts the roman index ("III") or the snake_case name ("wealth_elite").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        for class in Self::ALL {
            if t.eq_ignore_ascii_case(class.roman()) {
                return Ok(class);
            }
        }
        serde_json::from_value(serde_json::Value::String(t.to_ascii_lowercase()))
            .map_err(|_| DomainError::UnknownClass(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerProfile {
    pub uid: Uid,
    pub class: ProfileClass,
    pub skill: f64,
    pub frustration_tolerance: f64,
    pub spend_propensity: f64,
    /// Probability of starting a session on a given day.
    pub activeness: f64,
    /// Mean session length in steps.
    pub session_length_mean: u32,
    /// Propensity to keep using informal trades once an official market exists.
    pub habit_informal_trade: f64,
}

impl PlayerProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        let unit = [
            ("skill", self.skill),
            ("frustration_tolerance", self.frustration_tolerance),
            ("spend_propensity", self.spend_propensity),
            ("activeness", self.activeness),
            ("habit_informal_trade", self.habit_informal_trade),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(DomainError::OutOfRange {
                    uid: self.uid,
                    field,
                    value: v,
                });
            }
        }
        if self.session_length_mean < 1 {
            return Err(DomainError::OutOfRange {
                uid: self.uid,
                field: "session_length_mean",
                value: self.session_length_mean as f64,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "account", content = "uid", rename_all = "snake_case")]
pub enum Account {
    Player(Uid),
    SystemReserve,
    Burn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    BattleReward,
    NpcPurchase,
    MarketTrade,
    Tax,
    InformalTrade,
    Adjustment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub seq: u64,
    pub step: SimTime,
    pub from: Account,
    pub to: Account,
    pub amount: Credits,
    pub kind: TransferKind,
}

/// Position on the discrete clock. `abs_step = day * N + step_in_day`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimTime {
    pub day: u32,
    pub step_in_day: u32,
    pub abs_step: u64,
}

impl SimTime {
    pub fn from_abs(abs_step: u64, steps_per_day: u32) -> Self {
        assert!(steps_per_day >= 1, "steps_per_day must be positive");
        let n = steps_per_day as u64;
        SimTime {
            day: (abs_step / n) as u32,
            step_in_day: (abs_step % n) as u32,
            abs_step,
        }
    }

    pub fn new(day: u32, step_in_day: u32, steps_per_day: u32) -> Self {
        assert!(step_in_day < steps_per_day, "step_in_day out of range");
        SimTime {
            day,
            step_in_day,
            abs_step: day as u64 * steps_per_day as u64 + step_in_day as u64,
        }
    }

    pub fn is_consistent(&self, steps_per_day: u32) -> bool {
        *self == SimTime::from_abs(self.abs_step, steps_per_day)
    }
}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.abs_step.cmp(&other.abs_step)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}s{}", self.day, self.step_in_day)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BattleOutcome {
    pub uid: Uid,
    /// Per-season match counter, starting at 1.
    pub match_index: u32,
    pub win: bool,
    pub income: Credits,
    pub step: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub step: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uid: Option<Uid>,
    pub payload: EventPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    StateTransition {
        from: AgentState,
        to: AgentState,
    },
    ActionChosen {
        action: Action,
        /// Decision state the action was taken from (offline for session rolls).
        state: AgentState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rationale_text: Option<String>,
    },
    BattleResolved {
        outcome: BattleOutcome,
    },
    TradeExecuted {
        listing_id: ListingId,
        buyer: Uid,
        seller: Uid,
        item: ItemInstance,
        price: Credits,
        tax: Credits,
    },
    InformalTradeExecuted {
        u1: Uid,
        u2: Uid,
        item: ItemInstance,
        fraud: bool,
        /// Untaxed side payment from u2 to u1; zero when the trade was a fraud.
        price: Credits,
    },
    NpcPurchase {
        item: ItemInstance,
        price: Credits,
    },
    ListingCreated {
        listing_id: ListingId,
        item: ItemInstance,
        ask_price: Credits,
    },
    ListingCancelled {
        listing_id: ListingId,
        item: ItemInstance,
    },
    LootAcquired {
        item: ItemInstance,
    },
    ItemLost {
        item: ItemInstance,
    },
    /// A consumable used up when entering a match.
    ItemConsumed {
        item: ItemInstance,
    },
    InterventionApplied {
        intervention_id: u64,
        change: InterventionKind,
    },
    MessageDelivered {
        msg_id: u64,
        topic: Topic,
        body: String,
    },
    ActionRejected {
        action: Action,
        reason: String,
    },
    PolicyFailure {
        reason: String,
    },
    SessionStart,
    SessionEnd,
}

impl EventPayload {
    /// The `kind` tag as it appears in serialized records.
    pub fn kind_name(&self) -> &'static str {
        match self {
            EventPayload::StateTransition { .. } => "state_transition",
            EventPayload::ActionChosen { .. } => "action_chosen",
            EventPayload::BattleResolved { .. } => "battle_resolved",
            EventPayload::TradeExecuted { .. } => "trade_executed",
            EventPayload::InformalTradeExecuted { .. } => "informal_trade_executed",
            EventPayload::NpcPurchase { .. } => "npc_purchase",
            EventPayload::ListingCreated { .. } => "listing_created",
            EventPayload::ListingCancelled { .. } => "listing_cancelled",
            EventPayload::LootAcquired { .. } => "loot_acquired",
            EventPayload::ItemLost { .. } => "item_lost",
            EventPayload::ItemConsumed { .. } => "item_consumed",
            EventPayload::InterventionApplied { .. } => "intervention_applied",
            EventPayload::MessageDelivered { .. } => "message_delivered",
            EventPayload::ActionRejected { .. } => "action_rejected",
            EventPayload::PolicyFailure { .. } => "policy_failure",
            EventPayload::SessionStart => "session_start",
            EventPayload::SessionEnd => "session_end",
        }
    }
}

impl Event {
    /// Whether the event is about `uid`, as actor or trade counterparty.
    pub fn concerns(&self, uid: Uid) -> bool {
        self.uid == Some(uid)
            || match &self.payload {
                EventPayload::TradeExecuted { buyer, seller, .. } => *buyer == uid || *seller == uid,
                EventPayload::InformalTradeExecuted { u1, u2, .. } => *u1 == uid || *u2 == uid,
                _ => false,
            }
    }

    /// One line-delimited record, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization is infallible")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("{action:?} is not a planning decision from state {state:?}")]
    IllegalDecisionPoint { action: Action, state: AgentState },
    #[error("profile {uid}: {field} = {value} is out of range")]
    OutOfRange {
        uid: Uid,
        field: &'static str,
        value: f64,
    },
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("unknown agent state {0:?}")]
    UnknownState(String),
    #[error("unknown profile class {0:?}")]
    UnknownClass(String),
}

/// Static adjacency of the agent state graph.
pub fn legal_transitions(state: AgentState) -> BTreeSet<AgentState> {
    use AgentState::*;
    let targets: &[AgentState] = match state {
        Offline => &[Online],
        Online => &[Battle, Market, Offline],
        Battle => &[Online],
        Market => &[Online, Market],
    };
    targets.iter().copied().collect()
}

pub fn is_legal_transition(from: AgentState, to: AgentState) -> bool {
    legal_transitions(from).contains(&to)
}

/// State an agent ends up in after executing `action` from a decision point.
pub fn action_target(action: Action, current: AgentState) -> Result<AgentState, DomainError> {
    if !current.is_decision_point() {
        return Err(DomainError::IllegalDecisionPoint {
            action,
            state: current,
        });
    }
    Ok(match action {
        Action::Offline => AgentState::Offline,
        Action::Battle => AgentState::Battle,
        Action::Buy | Action::Sell => AgentState::Market,
    })
}

/// Legal edge sequence from `from` to `to`, routing through the lobby when
/// there is no direct edge (market to battle, market to offline).
pub fn transition_path(from: AgentState, to: AgentState) -> Vec<(AgentState, AgentState)> {
    if is_legal_transition(from, to) {
        return vec![(from, to)];
    }
    if from != AgentState::Online
        && is_legal_transition(from, AgentState::Online)
        && is_legal_transition(AgentState::Online, to)
    {
        return vec![(from, AgentState::Online), (AgentState::Online, to)];
    }
    Vec::new()
}
