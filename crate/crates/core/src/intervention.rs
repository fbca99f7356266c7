//! Scheduled and live mutations of a running world: feature flags, numeric
//! parameters and broadcast announcements.
//!
//! Due interventions are applied at the very start of their step, before
//! message delivery and planning, so every decision in that step sees the
//! complete new parameter set. The explanatory broadcast (when `announce`
//! is set) is published in the same step and therefore delivered one step
//! later.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Credits, ItemId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFlags {
    #[serde(default = "yes")]
    pub npc_shop_enabled: bool,
    #[serde(default)]
    pub black_market_enabled: bool,
    #[serde(default = "yes")]
    pub informal_trade_enabled: bool,
}

fn yes() -> bool {
    true
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            npc_shop_enabled: true,
            black_market_enabled: false,
            informal_trade_enabled: true,
        }
    }
}

impl FeatureFlags {
    pub const NAMES: [&'static str; 3] = [
        "npc_shop_enabled",
        "black_market_enabled",
        "informal_trade_enabled",
    ];

    pub fn get(&self, name: &str) -> Option<bool> {
        match name {
            "npc_shop_enabled" => Some(self.npc_shop_enabled),
            "black_market_enabled" => Some(self.black_market_enabled),
            "informal_trade_enabled" => Some(self.informal_trade_enabled),
            _ => None,
        }
    }

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        match name {
            "npc_shop_enabled" => Some(&mut self.npc_shop_enabled),
            "black_market_enabled" => Some(&mut self.black_market_enabled),
            "informal_trade_enabled" => Some(&mut self.informal_trade_enabled),
            _ => None,
        }
    }
}

/// The parameters an intervention may change while a run is live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveParams {
    pub flags: FeatureFlags,
    pub tax_rate: f64,
    pub p_fraud: f64,
    pub habit_decay: f64,
    pub lambda_win: f64,
    pub npc_prices: BTreeMap<ItemId, Credits>,
}

impl LiveParams {
    /// Applies an already validated change.
    pub fn apply(&mut self, kind: &InterventionKind) {
        match kind {
            InterventionKind::EnableFeature { name } => {
                if let Some(f) = self.flags.slot(name) {
                    *f = true;
                }
            }
            InterventionKind::DisableFeature { name } => {
                if let Some(f) = self.flags.slot(name) {
                    *f = false;
                }
            }
            InterventionKind::SetParam { path, value } => match ParamPath::parse(path) {
                Ok(ParamPath::TaxRate) => self.tax_rate = *value,
                Ok(ParamPath::PFraud) => self.p_fraud = *value,
                Ok(ParamPath::HabitDecay) => self.habit_decay = *value,
                Ok(ParamPath::LambdaWin) => self.lambda_win = *value,
                Ok(ParamPath::NpcPrice(item)) => {
                    self.npc_prices.insert(item, *value as Credits);
                }
                Err(_) => {}
            },
            InterventionKind::BroadcastEvent { .. } => {}
        }
    }

    pub fn validate(&self, kind: &InterventionKind) -> Result<(), InterventionError> {
        match kind {
            InterventionKind::EnableFeature { name } | InterventionKind::DisableFeature { name } => {
                if self.flags.get(name).is_none() {
                    return Err(InterventionError::UnknownFeature(name.clone()));
                }
            }
            InterventionKind::SetParam { path, value } => {
                let p = ParamPath::parse(path)?;
                let v = *value;
                let ok = v.is_finite()
                    && match p {
                        ParamPath::TaxRate => (0.0..1.0).contains(&v),
                        ParamPath::PFraud | ParamPath::HabitDecay => (0.0..=1.0).contains(&v),
                        ParamPath::LambdaWin => v >= 1.0,
                        ParamPath::NpcPrice(item) => {
                            if !self.npc_prices.contains_key(&item) {
                                return Err(InterventionError::UnknownParamPath(path.clone()));
                            }
                            v >= 1.0 && v.fract() == 0.0
                        }
                    };
                if !ok {
                    return Err(InterventionError::InvalidValue {
                        path: path.clone(),
                        value: v,
                    });
                }
            }
            InterventionKind::BroadcastEvent { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamPath {
    TaxRate,
    PFraud,
    HabitDecay,
    LambdaWin,
    NpcPrice(ItemId),
}

impl ParamPath {
    fn parse(path: &str) -> Result<Self, InterventionError> {
        let unknown = || InterventionError::UnknownParamPath(path.to_string());
        match path {
            "tax_rate" => Ok(ParamPath::TaxRate),
            "p_fraud" => Ok(ParamPath::PFraud),
            "habit_decay" => Ok(ParamPath::HabitDecay),
            "battle.lambda_win" => Ok(ParamPath::LambdaWin),
            _ => {
                let id = path.strip_prefix("npc_price.").ok_or_else(unknown)?;
                id.parse::<u32>().map(|i| ParamPath::NpcPrice(ItemId(i))).map_err(|_| unknown())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKind {
    EnableFeature { name: String },
    DisableFeature { name: String },
    /// `path` is one of `tax_rate`, `p_fraud`, `habit_decay`,
    /// `battle.lambda_win` or `npc_price.<item_id>`.
    SetParam { path: String, value: f64 },
    BroadcastEvent { body: String },
}

impl InterventionKind {
    pub fn describe(&self) -> String {
        match self {
            InterventionKind::EnableFeature { name } => format!("{name} switched on"),
            InterventionKind::DisableFeature { name } => format!("{name} switched off"),
            InterventionKind::SetParam { path, value } => format!("{path} set to {value}"),
            InterventionKind::BroadcastEvent { body } => body.clone(),
        }
    }
}

/// Submission form, shared by run configs and the control API. A missing
/// `at_step` means "the next step that has not executed yet".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_step: Option<u64>,
    pub kind: InterventionKind,
    #[serde(default = "yes")]
    pub announce: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub intervention_id: u64,
    pub at_step: u64,
    pub kind: InterventionKind,
    pub announce: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterventionError {
    #[error("step {at_step} has already executed (next step is {next_step})")]
    PastStep { at_step: u64, next_step: u64 },
    #[error("unknown parameter path {0:?}")]
    UnknownParamPath(String),
    #[error("invalid value {value} for {path}")]
    InvalidValue { path: String, value: f64 },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionTimeline {
    next_id: u64,
    scheduled: BTreeMap<u64, Intervention>,
    applied: BTreeSet<u64>,
}

impl InterventionTimeline {
    pub fn new() -> Self {
        InterventionTimeline {
            next_id: 1,
            ..Default::default()
        }
    }

    /// Validates and stores an intervention. Resubmitting an identical
    /// intervention returns the id it already has.
    pub fn schedule(
        &mut self,
        req: InterventionRequest,
        next_step: u64,
        params: &LiveParams,
    ) -> Result<u64, InterventionError> {
        let at_step = req.at_step.unwrap_or(next_step);
        if at_step < next_step {
            return Err(InterventionError::PastStep { at_step, next_step });
        }
        params.validate(&req.kind)?;
        if let Some(existing) = self
            .scheduled
            .values()
            .find(|iv| iv.at_step == at_step && iv.kind == req.kind && iv.announce == req.announce)
        {
            return Ok(existing.intervention_id);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.scheduled.insert(
            id,
            Intervention {
                intervention_id: id,
                at_step,
                kind: req.kind,
                announce: req.announce,
            },
        );
        Ok(id)
    }

    /// Applies everything due at `step` in id order and returns what was
    /// applied. All changes land before the caller lets anyone plan.
    pub fn apply_due(&mut self, step: u64, params: &mut LiveParams) -> Vec<Intervention> {
        let due: Vec<Intervention> = self
            .scheduled
            .values()
            .filter(|iv| iv.at_step == step && !self.applied.contains(&iv.intervention_id))
            .cloned()
            .collect();
        let mut next = params.clone();
        for iv in &due {
            next.apply(&iv.kind);
            self.applied.insert(iv.intervention_id);
        }
        *params = next;
        due
    }

    pub fn get(&self, id: u64) -> Option<&Intervention> {
        self.scheduled.get(&id)
    }

    pub fn all(&self) -> impl Iterator<Item = &Intervention> {
        self.scheduled.values()
    }

    pub fn is_applied(&self, id: u64) -> bool {
        self.applied.contains(&id)
    }
}
