//! Statistics recomputed from a run's config and event log alone.
//!
//! Nothing here reads engine state: balances, states and counters are
//! rebuilt by replaying events over the initial conditions in the config.

mod accuracy;

pub use accuracy::{majority_predictions, stepwise_accuracy, AccuracyReport, Prediction};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Action, AgentState, Credits, Event, EventPayload, PlayerProfile, ProfileClass, Uid};
use crate::engine::{ConfigError, MoneySupply, RunConfig};
use crate::intervention::{FeatureFlags, InterventionKind};
use crate::policy::{OutcomeSummary, CONTEXT_OUTCOMES};

pub const FRAME_VERSION: u32 = 1;

/// Wealth tiers per class in the rank panel.
pub const RANK_TIERS: usize = 5;

/// Lower edges of the wealth histogram: 0, then decades from 1 to 10⁹.
pub const WEALTH_BIN_EDGES: [Credits; 11] = [
    0,
    1,
    10,
    100,
    1_000,
    10_000,
    100_000,
    1_000_000,
    10_000_000,
    100_000_000,
    1_000_000_000,
];

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("step {step} not reached; the log covers {committed} steps")]
    StepNotReached { step: u64, committed: u64 },
    #[error("no truth record for uid {uid} at step {t}")]
    MissingTruth { uid: Uid, t: u64 },
    #[error("duplicate prediction for uid {uid} at step {t}")]
    DuplicatePrediction { uid: Uid, t: u64 },
    #[error("intervention {0} was not applied in this log")]
    NotApplied(u64),
    #[error("log is inconsistent with its config: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Config(Box<ConfigError>),
}

impl From<ConfigError> for AnalyticsError {
    fn from(e: ConfigError) -> Self {
        AnalyticsError::Config(Box::new(e))
    }
}

/// A committed log prefix plus the config that produced it.
#[derive(Clone, Copy, Debug)]
pub struct LogView<'a> {
    pub config: &'a RunConfig,
    pub events: &'a [Event],
    /// Number of fully executed steps covered by `events`.
    pub committed_steps: u64,
}

impl<'a> LogView<'a> {
    pub fn new(config: &'a RunConfig, events: &'a [Event], committed_steps: u64) -> Self {
        LogView {
            config,
            events,
            committed_steps,
        }
    }

    pub fn check_step(&self, step: u64) -> Result<(), AnalyticsError> {
        if step >= self.committed_steps {
            return Err(AnalyticsError::StepNotReached {
                step,
                committed: self.committed_steps,
            });
        }
        Ok(())
    }
}

/// Trade and purchase counts used by the informal share.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeCounts {
    pub informal: u64,
    /// Black-market fills.
    pub market: u64,
    /// NPC shop purchases.
    pub npc: u64,
}

impl TradeCounts {
    fn add(&mut self, o: &TradeCounts) {
        self.informal += o.informal;
        self.market += o.market;
        self.npc += o.npc;
    }

    /// Informal trades over all completed item acquisitions; `None` when
    /// there were none.
    pub fn informal_share(&self) -> Option<f64> {
        let total = self.informal + self.market + self.npc;
        (total > 0).then(|| self.informal as f64 / total as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub actions: [u64; 4],
    pub trades: TradeCounts,
}

/// What a player knew about themselves at a point in the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayedAgent {
    pub profile: PlayerProfile,
    pub state: AgentState,
    pub balance: Credits,
    pub matches_played: u32,
    pub last_outcomes: VecDeque<OutcomeSummary>,
    pub broadcasts_pending: u32,
    pub latest_rationale: Option<String>,
}

/// Incremental replay of a log over the config's initial conditions.
#[derive(Clone, Debug)]
pub struct LogReplay {
    steps_per_day: u32,
    agents: Vec<ReplayedAgent>,
    reserve: Credits,
    burn: Credits,
    initial_total: u128,
    npc_spent: u128,
    tax_burned: u128,
    flags: FeatureFlags,
    next_seq: u64,
    per_step: Vec<StepCounts>,
}

impl LogReplay {
    pub fn new(config: &RunConfig) -> Result<Self, AnalyticsError> {
        let profiles = config.profiles()?;
        let n = profiles.len() as u128;
        let e = &config.economy;
        Ok(LogReplay {
            steps_per_day: config.steps_per_day,
            agents: profiles
                .into_iter()
                .map(|profile| ReplayedAgent {
                    profile,
                    state: AgentState::Offline,
                    balance: e.initial_balance,
                    matches_played: 0,
                    last_outcomes: VecDeque::new(),
                    broadcasts_pending: 0,
                    latest_rationale: None,
                })
                .collect(),
            reserve: e.initial_reserve,
            burn: 0,
            initial_total: n * e.initial_balance as u128 + e.initial_reserve as u128,
            npc_spent: 0,
            tax_burned: 0,
            flags: config.feature_flags,
            next_seq: 1,
            per_step: Vec::new(),
        })
    }

    /// Replays every event of steps `<= step`.
    pub fn at(view: &LogView, step: u64) -> Result<Self, AnalyticsError> {
        view.check_step(step)?;
        let mut r = Self::new(view.config)?;
        for e in view.events.iter().take_while(|e| e.step.abs_step <= step) {
            r.apply(e)?;
        }
        r.touch_step(step);
        Ok(r)
    }

    fn touch_step(&mut self, step: u64) {
        let need = step as usize + 1;
        if self.per_step.len() < need {
            self.per_step.resize(need, StepCounts::default());
        }
    }

    fn agent_mut(&mut self, uid: Uid) -> Result<&mut ReplayedAgent, AnalyticsError> {
        self.agents
            .get_mut(uid.0 as usize)
            .ok_or_else(|| AnalyticsError::Inconsistent(format!("unknown uid {uid}")))
    }

    fn debit(balance: &mut Credits, amount: Credits, what: &str) -> Result<(), AnalyticsError> {
        *balance = balance
            .checked_sub(amount)
            .ok_or_else(|| AnalyticsError::Inconsistent(format!("{what} overdrawn by {amount}")))?;
        Ok(())
    }

    pub fn apply(&mut self, e: &Event) -> Result<(), AnalyticsError> {
        if e.seq != self.next_seq {
            return Err(AnalyticsError::Inconsistent(format!(
                "expected seq {}, found {}",
                self.next_seq, e.seq
            )));
        }
        self.next_seq += 1;
        let t = e.step.abs_step;
        self.touch_step(t);
        let counts = &mut self.per_step[t as usize];
        match &e.payload {
            EventPayload::ActionChosen { action, .. } => counts.actions[action.index()] += 1,
            EventPayload::TradeExecuted { .. } => counts.trades.market += 1,
            EventPayload::InformalTradeExecuted { .. } => counts.trades.informal += 1,
            EventPayload::NpcPurchase { .. } => counts.trades.npc += 1,
            _ => {}
        }
        match &e.payload {
            EventPayload::StateTransition { from, to } => {
                let a = self.agent_mut(e.uid.unwrap_or(Uid(u32::MAX)))?;
                if a.state != *from {
                    return Err(AnalyticsError::Inconsistent(format!(
                        "seq {}: transition from {from:?} but agent is {:?}",
                        e.seq, a.state
                    )));
                }
                a.state = *to;
            }
            EventPayload::ActionChosen { rationale_text, .. } => {
                let a = self.agent_mut(e.uid.unwrap_or(Uid(u32::MAX)))?;
                a.latest_rationale = rationale_text.clone();
                a.broadcasts_pending = 0;
            }
            EventPayload::MessageDelivered { topic, .. } => {
                if *topic == crate::messaging::Topic::Broadcast {
                    self.agent_mut(e.uid.unwrap_or(Uid(u32::MAX)))?.broadcasts_pending += 1;
                }
            }
            EventPayload::BattleResolved { outcome } => {
                Self::debit(&mut self.reserve, outcome.income, "reserve")?;
                let a = self.agent_mut(outcome.uid)?;
                a.balance += outcome.income;
                a.matches_played = a.matches_played.max(outcome.match_index);
                a.last_outcomes.push_back(OutcomeSummary {
                    match_index: outcome.match_index,
                    win: outcome.win,
                    income: outcome.income,
                    step: t,
                });
                while a.last_outcomes.len() > CONTEXT_OUTCOMES {
                    a.last_outcomes.pop_front();
                }
            }
            EventPayload::NpcPurchase { price, .. } => {
                let a = self.agent_mut(e.uid.unwrap_or(Uid(u32::MAX)))?;
                Self::debit(&mut a.balance, *price, "npc buyer")?;
                self.reserve += price;
                self.npc_spent += *price as u128;
            }
            EventPayload::TradeExecuted {
                buyer,
                seller,
                price,
                tax,
                ..
            } => {
                Self::debit(&mut self.agent_mut(*buyer)?.balance, *price, "market buyer")?;
                self.agent_mut(*seller)?.balance += price - tax;
                self.burn += tax;
                self.tax_burned += *tax as u128;
            }
            EventPayload::InformalTradeExecuted { u1, u2, price, .. } => {
                Self::debit(&mut self.agent_mut(*u2)?.balance, *price, "informal buyer")?;
                self.agent_mut(*u1)?.balance += price;
            }
            EventPayload::InterventionApplied { change, .. } => match change {
                InterventionKind::EnableFeature { name } => self.set_flag(name, true),
                InterventionKind::DisableFeature { name } => self.set_flag(name, false),
                _ => {}
            },
            _ => {}
        }
        Ok(())
    }

    fn set_flag(&mut self, name: &str, on: bool) {
        match name {
            "npc_shop_enabled" => self.flags.npc_shop_enabled = on,
            "black_market_enabled" => self.flags.black_market_enabled = on,
            "informal_trade_enabled" => self.flags.informal_trade_enabled = on,
            _ => {}
        }
    }

    pub fn agents(&self) -> &[ReplayedAgent] {
        &self.agents
    }

    pub fn agent(&self, uid: Uid) -> Option<&ReplayedAgent> {
        self.agents.get(uid.0 as usize)
    }

    pub fn flags(&self) -> FeatureFlags {
        self.flags
    }

    pub fn steps_per_day(&self) -> u32 {
        self.steps_per_day
    }

    pub fn money_supply(&self) -> MoneySupply {
        MoneySupply {
            players_total: self.agents.iter().map(|a| a.balance as u128).sum(),
            reserve: self.reserve,
            burn: self.burn,
        }
    }

    pub fn initial_total(&self) -> u128 {
        self.initial_total
    }

    pub fn per_step(&self) -> &[StepCounts] {
        &self.per_step
    }

    /// Trade counts summed over steps `[from, to)`.
    pub fn trades_between(&self, from: u64, to: u64) -> TradeCounts {
        let mut c = TradeCounts::default();
        let end = (to as usize).min(self.per_step.len());
        for s in self.per_step.get(from as usize..end).unwrap_or(&[]) {
            c.add(&s.trades);
        }
        c
    }

    /// Frame for the state at the end of `step`; all events of `step` must
    /// already be applied.
    pub fn frame(&self, step: u64, window: u64) -> StatsFrame {
        let balances: Vec<Credits> = self.agents.iter().map(|a| a.balance).collect();
        let counts = self.per_step.get(step as usize).copied().unwrap_or_default();
        let decided: u64 = counts.actions.iter().sum();
        let action_shares = (decided > 0).then(|| {
            Action::ALL
                .iter()
                .map(|a| (*a, counts.actions[a.index()] as f64 / decided as f64))
                .collect()
        });
        let from = (step + 1).saturating_sub(window.max(1));
        let trades = self.trades_between(from, step + 1);
        let online = self.agents.iter().filter(|a| a.state != AgentState::Offline).count();
        StatsFrame {
            version: FRAME_VERSION,
            step,
            wealth_histogram: WealthHistogram::of(&balances),
            rank_distribution: rank_distribution(&self.agents),
            resource_consumption: ResourceConsumption {
                npc: self.npc_spent,
                tax: self.tax_burned,
            },
            activeness: online as f64 / self.agents.len().max(1) as f64,
            money_supply: self.money_supply(),
            action_counts: Action::ALL.iter().map(|a| (*a, counts.actions[a.index()])).collect(),
            action_shares,
            informal_trade_share: WindowShare {
                window,
                counts: trades,
                share: trades.informal_share(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WealthHistogram {
    pub lower_edges: Vec<Credits>,
    pub counts: Vec<u64>,
    pub gini: f64,
}

impl WealthHistogram {
    pub fn of(balances: &[Credits]) -> Self {
        let mut counts = vec![0u64; WEALTH_BIN_EDGES.len()];
        for &b in balances {
            let bin = WEALTH_BIN_EDGES.iter().rposition(|&e| b >= e).unwrap_or(0);
            counts[bin] += 1;
        }
        WealthHistogram {
            lower_edges: WEALTH_BIN_EDGES.to_vec(),
            counts,
            gini: gini(balances),
        }
    }
}

/// Population Gini coefficient, 0 when the mean is 0.
pub fn gini(values: &[Credits]) -> f64 {
    let n = values.len();
    let total: u128 = values.iter().map(|v| *v as u128).sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    // Σᵢ Σⱼ |xᵢ − xⱼ| = 2 Σᵢ (2i − n − 1)·x₍ᵢ₎ over the ascending order.
    let mut acc: i128 = 0;
    for (i, x) in sorted.iter().enumerate() {
        acc += (2 * (i as i128 + 1) - n as i128 - 1) * *x as i128;
    }
    acc as f64 / (n as f64 * total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConsumption {
    /// Cumulative NPC shop spending.
    pub npc: u128,
    /// Cumulative market tax burned.
    pub tax: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowShare {
    /// Trailing window length in steps, ending at the frame's step.
    pub window: u64,
    pub counts: TradeCounts,
    pub share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFrame {
    pub version: u32,
    pub step: u64,
    pub wealth_histogram: WealthHistogram,
    /// Per class, counts in each population-wide wealth quintile (tier 0 is
    /// the richest fifth).
    pub rank_distribution: BTreeMap<ProfileClass, [u32; RANK_TIERS]>,
    pub resource_consumption: ResourceConsumption,
    /// Fraction of players not offline.
    pub activeness: f64,
    pub money_supply: MoneySupply,
    pub action_counts: BTreeMap<Action, u64>,
    /// `None` when nobody decided this step.
    pub action_shares: Option<BTreeMap<Action, f64>>,
    pub informal_trade_share: WindowShare,
}

fn rank_distribution(agents: &[ReplayedAgent]) -> BTreeMap<ProfileClass, [u32; RANK_TIERS]> {
    let mut order: Vec<&ReplayedAgent> = agents.iter().collect();
    order.sort_by(|a, b| b.balance.cmp(&a.balance).then(a.profile.uid.cmp(&b.profile.uid)));
    let n = order.len().max(1);
    let mut out: BTreeMap<ProfileClass, [u32; RANK_TIERS]> =
        ProfileClass::ALL.iter().map(|c| (*c, [0; RANK_TIERS])).collect();
    for (rank, a) in order.iter().enumerate() {
        let tier = rank * RANK_TIERS / n;
        out.get_mut(&a.profile.class).expect("every class present")[tier] += 1;
    }
    out
}

/// Statistics at the end of `step`, computed from the log prefix alone.
pub fn compute_frame(view: &LogView, step: u64, window: u64) -> Result<StatsFrame, AnalyticsError> {
    Ok(LogReplay::at(view, step)?.frame(step, window))
}

/// One frame per committed step, in a single pass.
pub fn all_frames(view: &LogView, window: u64) -> Result<Vec<StatsFrame>, AnalyticsError> {
    let mut r = LogReplay::new(view.config)?;
    let mut out = Vec::with_capacity(view.committed_steps as usize);
    let mut events = view.events.iter().peekable();
    for step in 0..view.committed_steps {
        while let Some(e) = events.next_if(|e| e.step.abs_step <= step) {
            r.apply(e)?;
        }
        r.touch_step(step);
        out.push(r.frame(step, window));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyStats {
    pub day: u32,
    pub gini: f64,
    /// Mean over the day's steps.
    pub activeness: f64,
    pub money_supply: MoneySupply,
    pub action_counts: BTreeMap<Action, u64>,
    pub trades: TradeCounts,
    pub informal_share: Option<f64>,
    pub npc_spent: u128,
    pub tax_burned: u128,
}

/// Per-day aggregates over complete days of the log.
pub fn daily_series(view: &LogView) -> Result<Vec<DailyStats>, AnalyticsError> {
    let spd = view.config.steps_per_day as u64;
    let frames = all_frames(view, spd)?;
    let mut out = Vec::new();
    for (day, chunk) in frames.chunks(spd as usize).enumerate() {
        if chunk.len() < spd as usize {
            break;
        }
        let last = chunk.last().expect("chunk is full");
        let mut actions: BTreeMap<Action, u64> = Action::ALL.iter().map(|a| (*a, 0)).collect();
        for f in chunk {
            for (a, c) in &f.action_counts {
                *actions.get_mut(a).expect("all actions") += c;
            }
        }
        let trades = last.informal_trade_share.counts;
        out.push(DailyStats {
            day: day as u32,
            gini: last.wealth_histogram.gini,
            activeness: chunk.iter().map(|f| f.activeness).sum::<f64>() / chunk.len() as f64,
            money_supply: last.money_supply,
            action_counts: actions,
            trades,
            informal_share: trades.informal_share(),
            npc_spent: last.resource_consumption.npc,
            tax_burned: last.resource_consumption.tax,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayShare {
    pub day: u32,
    pub counts: TradeCounts,
    pub share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub intervention_id: u64,
    pub at_step: u64,
    pub window: u64,
    pub settle: u64,
    /// Steps `[at_step − window, at_step)`.
    pub pre: WindowShare,
    /// Steps `[at_step + settle, at_step + settle + window)`, clipped to the log.
    pub post: WindowShare,
    pub series: Vec<DayShare>,
}

/// Informal-trade share before and after an applied intervention.
pub fn intervention_report(
    view: &LogView,
    intervention_id: u64,
    window: u64,
    settle: u64,
) -> Result<InterventionReport, AnalyticsError> {
    let at_step = view
        .events
        .iter()
        .find_map(|e| match e.payload {
            EventPayload::InterventionApplied { intervention_id: id, .. } if id == intervention_id => {
                Some(e.step.abs_step)
            }
            _ => None,
        })
        .ok_or(AnalyticsError::NotApplied(intervention_id))?;
    let end = view.committed_steps;
    let mut r = LogReplay::new(view.config)?;
    for e in view.events {
        r.apply(e)?;
    }
    if end > 0 {
        r.touch_step(end - 1);
    }
    let share = |from: u64, to: u64| {
        let counts = r.trades_between(from, to.min(end));
        WindowShare {
            window,
            counts,
            share: counts.informal_share(),
        }
    };
    let spd = view.config.steps_per_day as u64;
    let series = (0..end.div_ceil(spd))
        .map(|d| {
            let counts = r.trades_between(d * spd, ((d + 1) * spd).min(end));
            DayShare {
                day: d as u32,
                counts,
                share: counts.informal_share(),
            }
        })
        .collect();
    Ok(InterventionReport {
        intervention_id,
        at_step,
        window,
        settle,
        pre: share(at_step.saturating_sub(window), at_step),
        post: share(at_step + settle, at_step + settle + window),
        series,
    })
}

/// Agents by state at the end of `step`, with class and balance.
pub fn agents_by_state(
    view: &LogView,
    step: u64,
) -> Result<BTreeMap<AgentState, Vec<AgentSummary>>, AnalyticsError> {
    let r = LogReplay::at(view, step)?;
    let mut out: BTreeMap<AgentState, Vec<AgentSummary>> =
        AgentState::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for a in r.agents() {
        out.get_mut(&a.state).expect("all states").push(AgentSummary {
            uid: a.profile.uid,
            class: a.profile.class,
            balance: a.balance,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub uid: Uid,
    pub class: ProfileClass,
    pub balance: Credits,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_gini(xs: &[Credits]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|x| *x as f64).sum::<f64>() / n;
        if mean == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for a in xs {
            for b in xs {
                s += (*a as f64 - *b as f64).abs();
            }
        }
        s / (2.0 * n * n * mean)
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[5, 5, 5, 5]), 0.0);
        assert_eq!(gini(&[0, 0, 0, 100]), 0.75);
        assert_eq!(gini(&[0, 0]), 0.0);
        assert_eq!(gini(&[]), 0.0);
    }

    #[test]
    fn histogram_bins() {
        let h = WealthHistogram::of(&[0, 1, 9, 10, 999, 1000, 5_000_000_000]);
        assert_eq!(h.counts, vec![1, 2, 1, 1, 1, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn share_undefined_without_trades() {
        assert_eq!(TradeCounts::default().informal_share(), None);
        let c = TradeCounts {
            informal: 1,
            market: 2,
            npc: 1,
        };
        assert_eq!(c.informal_share(), Some(0.25));
    }

    proptest! {
        #[test]
        fn gini_matches_pairwise_definition(xs in proptest::collection::vec(0u64..1_000_000, 1..40)) {
            let g = gini(&xs);
            prop_assert!((g - naive_gini(&xs)).abs() < 1e-9);
            let n = xs.len() as f64;
            prop_assert!(g >= -1e-12 && g <= (n - 1.0) / n + 1e-12);
        }
    }
}
