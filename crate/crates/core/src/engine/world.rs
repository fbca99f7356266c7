use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::{Action, AgentState, Credits, Event, PlayerProfile, Uid};
use crate::economy::Economy;
use crate::intervention::{InterventionTimeline, LiveParams};
use crate::messaging::MessageBus;
use crate::policy::OutcomeSummary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Battle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingTask {
    pub kind: TaskKind,
    pub completes_at: u64,
    pub match_index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRuntime {
    pub profile: PlayerProfile,
    pub state: AgentState,
    pub pending_task: Option<PendingTask>,
    pub session_steps_remaining: i64,
    pub match_count_this_season: u32,
    pub last_outcomes: VecDeque<OutcomeSummary>,
    pub recent_actions: VecDeque<Action>,
    /// Broadcast bodies delivered since the player last planned.
    pub pending_broadcasts: Vec<String>,
    /// Set once the player has been defrauded in an informal trade.
    pub fraud_victim: bool,
    pub latest_rationale: Option<String>,
    /// Last events that concern this player, oldest first.
    pub history: VecDeque<Event>,
}

impl AgentRuntime {
    pub fn new(profile: PlayerProfile) -> Self {
        AgentRuntime {
            profile,
            state: AgentState::Offline,
            pending_task: None,
            session_steps_remaining: 0,
            match_count_this_season: 0,
            last_outcomes: VecDeque::new(),
            recent_actions: VecDeque::new(),
            pending_broadcasts: Vec::new(),
            fraud_victim: false,
            latest_rationale: None,
            history: VecDeque::new(),
        }
    }

    pub fn uid(&self) -> Uid {
        self.profile.uid
    }

    pub fn is_decision_point(&self) -> bool {
        self.pending_task.is_none() && self.state.is_decision_point()
    }
}

/// Everything that changes while a run advances. Serializing this at a
/// step boundary is a complete snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    /// Next step to execute.
    pub now: u64,
    pub next_seq: u64,
    /// Indexed by uid.
    pub agents: Vec<AgentRuntime>,
    pub economy: Economy,
    pub params: LiveParams,
    pub timeline: InterventionTimeline,
    pub bus: MessageBus,
    /// Day on which the black market most recently opened.
    pub black_market_opened_day: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoneySupply {
    pub players_total: u128,
    pub reserve: Credits,
    pub burn: Credits,
}

impl MoneySupply {
    pub fn total(&self) -> u128 {
        self.players_total + self.reserve as u128 + self.burn as u128
    }
}

impl WorldState {
    pub fn money_supply(&self) -> MoneySupply {
        MoneySupply {
            players_total: self.economy.ledger.players_total(),
            reserve: self.economy.ledger.reserve(),
            burn: self.economy.ledger.burn(),
        }
    }

    pub fn agent(&self, uid: Uid) -> Option<&AgentRuntime> {
        self.agents.get(uid.0 as usize)
    }

    pub fn agents_in(&self, state: AgentState) -> impl Iterator<Item = &AgentRuntime> {
        self.agents.iter().filter(move |a| a.state == state)
    }
}
