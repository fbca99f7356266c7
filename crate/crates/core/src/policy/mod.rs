//! Player planners. Every implementation answers the same question: given
//! what this player knows right now, which of the four actions comes next.

mod heuristic;
mod remote;
mod replay;

pub use heuristic::{heuristic_score, ActionWeights, Betas, HeuristicPolicy, HeuristicWeights, ScoreTerm};
pub use remote::{RemotePolicy, RemoteRequest, RemoteResponse, StubPolicyServer, StubReply, WIRE_SCHEMA_VERSION};
pub use replay::ReplayPolicy;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Action, AgentState, Credits, PlayerProfile, SimTime, Uid};
use crate::economy::Channels;
use crate::engine::pool::PoolError;

/// Outcomes and actions kept in a planning context.
pub const CONTEXT_OUTCOMES: usize = 5;
pub const CONTEXT_ACTIONS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub match_index: u32,
    pub win: bool,
    pub income: Credits,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    pub profile: PlayerProfile,
    pub state: AgentState,
    pub balance: Credits,
    /// Oldest first.
    pub last_outcomes: Vec<OutcomeSummary>,
    /// Oldest first.
    pub recent_actions: Vec<Action>,
    pub broadcasts_pending: Vec<String>,
    pub channels: Channels,
    pub time: SimTime,
    pub session_steps_remaining: i64,
    /// Tradable items beyond the one gear piece a player keeps equipped.
    pub surplus_tradables: u32,
}

impl PolicyContext {
    pub fn last_was_loss(&self) -> bool {
        self.last_outcomes.last().is_some_and(|o| !o.win)
    }

    /// Consecutive losses at the end of the outcome history.
    pub fn loss_streak(&self) -> u32 {
        self.last_outcomes.iter().rev().take_while(|o| !o.win).count() as u32
    }

    /// Actions a planner may pick here. Selling needs something to sell and
    /// an open sell channel; buying needs an open buy channel.
    pub fn valid_actions(&self) -> [bool; 4] {
        let mut v = [true; 4];
        v[Action::Buy.index()] = self.channels.can_buy();
        v[Action::Sell.index()] = self.surplus_tradables > 0 && self.channels.can_sell();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDecision {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    /// Wall-clock planning time. Not part of the event log.
    #[serde(default)]
    pub latency_ms: f64,
}

impl ActionDecision {
    pub fn new(action: Action, rationale: impl Into<String>) -> Self {
        ActionDecision {
            action,
            rationale: Some(rationale.into()),
            latency_ms: 0.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("remote policy timed out")]
    Timeout,
    #[error("malformed remote response: {0}")]
    MalformedResponse(String),
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("remote transport: {0}")]
    Transport(String),
    #[error("no recorded action for uid {uid} at step {step}")]
    NoRecord { uid: Uid, step: u64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("policy setup: {0}")]
    Setup(String),
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Must depend only on `ctx` and draws from `rng`.
    fn decide(&self, ctx: &PolicyContext, rng: &mut dyn RngCore) -> Result<ActionDecision, PolicyError>;

    /// Used when `decide` fails. The default logs the player off.
    fn fallback(&self, _ctx: &PolicyContext, _rng: &mut dyn RngCore) -> ActionDecision {
        ActionDecision::new(Action::Offline, "fallback: planner failed, logging off")
    }

    /// Overrides the daily session roll (`Some(true)` = log in). `None`
    /// leaves it to the player's activeness.
    fn session_start(&self, _uid: Uid, _abs_step: u64) -> Option<bool> {
        None
    }
}

/// Always picks the same action.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn decide(&self, _ctx: &PolicyContext, _rng: &mut dyn RngCore) -> Result<ActionDecision, PolicyError> {
        Ok(ActionDecision::new(self.0, format!("{}: fixed policy", self.0)))
    }
}
