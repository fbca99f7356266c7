use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ActionDecision, Policy, PolicyContext, PolicyError};
use crate::domain::{Action, Credits, ProfileClass};

const DEFAULT_WEIGHTS: &str = include_str!("../../assets/heuristic_weights.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub loss_streak_buy: f64,
    pub frustration_offline: f64,
    pub session_over_offline: f64,
    pub low_balance_battle: f64,
    pub surplus_sell: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionWeights {
    pub offline: f64,
    pub battle: f64,
    pub buy: f64,
    pub sell: f64,
}

impl ActionWeights {
    pub fn get(&self, a: Action) -> f64 {
        match a {
            Action::Offline => self.offline,
            Action::Battle => self.battle,
            Action::Buy => self.buy,
            Action::Sell => self.sell,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        Action::ALL.map(|a| self.get(a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicWeights {
    pub version: u32,
    pub temperature: f64,
    /// Defaults to the cheapest catalog price.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reserve_floor: Option<Credits>,
    pub betas: Betas,
    pub base: BTreeMap<ProfileClass, ActionWeights>,
    pub reference_shares: ActionWeights,
}

impl Default for HeuristicWeights {
    fn default() -> Self {
        toml::from_str(DEFAULT_WEIGHTS).expect("bundled heuristic weights are valid")
    }
}

impl HeuristicWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err("heuristic temperature must be >= 0".into());
        }
        for class in ProfileClass::ALL {
            if !self.base.contains_key(&class) {
                return Err(format!("heuristic base weights missing class {class}"));
            }
        }
        let total: f64 = self.reference_shares.as_array().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("reference shares sum to {total}"));
        }
        Ok(())
    }
}

/// Additive score components, used to explain a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTerm {
    Base,
    LossStreakBuy,
    FrustrationOffline,
    SessionOverOffline,
    LowBalanceBattle,
    SurplusSell,
}

impl ScoreTerm {
    fn explain(self) -> &'static str {
        match self {
            ScoreTerm::Base => "usual preference for this player type",
            ScoreTerm::LossStreakBuy => "losing streak, wants better gear",
            ScoreTerm::FrustrationOffline => "frustrated by the last defeat",
            ScoreTerm::SessionOverOffline => "play session is over",
            ScoreTerm::LowBalanceBattle => "balance below reserve floor, needs income",
            ScoreTerm::SurplusSell => "holding surplus items to sell",
        }
    }
}

pub struct HeuristicPolicy {
    weights: HeuristicWeights,
    reserve_floor: Credits,
}

impl HeuristicPolicy {
    pub fn new(weights: HeuristicWeights, cheapest_price: Credits) -> Self {
        let reserve_floor = weights.reserve_floor.unwrap_or(cheapest_price);
        HeuristicPolicy {
            weights,
            reserve_floor,
        }
    }

    pub fn weights(&self) -> &HeuristicWeights {
        &self.weights
    }

    pub fn reserve_floor(&self) -> Credits {
        self.reserve_floor
    }

    /// Per-action score split into its terms (zero terms omitted).
    pub fn breakdown(&self, ctx: &PolicyContext) -> [Vec<(ScoreTerm, f64)>; 4] {
        let b = &self.weights.betas;
        let base = self.weights.base[&ctx.profile.class];
        let p = &ctx.profile;
        Action::ALL.map(|a| {
            let mut terms = vec![(ScoreTerm::Base, base.get(a))];
            let mut push = |t, v: f64| {
                if v != 0.0 {
                    terms.push((t, v));
                }
            };
            match a {
                Action::Buy => push(
                    ScoreTerm::LossStreakBuy,
                    b.loss_streak_buy * ctx.loss_streak() as f64 * p.spend_propensity,
                ),
                Action::Offline => {
                    if ctx.last_was_loss() {
                        push(ScoreTerm::FrustrationOffline, b.frustration_offline * (1.0 - p.frustration_tolerance));
                    }
                    if ctx.session_steps_remaining <= 0 {
                        push(ScoreTerm::SessionOverOffline, b.session_over_offline);
                    }
                }
                Action::Battle => {
                    if ctx.balance < self.reserve_floor {
                        push(ScoreTerm::LowBalanceBattle, b.low_balance_battle);
                    }
                }
                Action::Sell => {
                    if ctx.surplus_tradables > 0 {
                        push(ScoreTerm::SurplusSell, b.surplus_sell);
                    }
                }
            }
            terms
        })
    }

    pub fn scores(&self, ctx: &PolicyContext) -> [f64; 4] {
        self.breakdown(ctx).map(|t| t.iter().map(|(_, v)| v).sum())
    }

    /// Masked softmax over the scores at the configured temperature.
    /// Temperature 0 puts all mass on the best valid action (earliest
    /// action wins ties).
    pub fn probabilities(&self, ctx: &PolicyContext) -> [f64; 4] {
        masked_softmax(self.scores(ctx), ctx.valid_actions(), self.weights.temperature)
    }

    fn rationale(&self, ctx: &PolicyContext, action: Action) -> String {
        let terms = &self.breakdown(ctx)[action.index()];
        let dominant = terms
            .iter()
            .filter(|(t, v)| *t != ScoreTerm::Base && *v > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(ScoreTerm::Base, |(t, _)| *t);
        format!("{action}: {}", dominant.explain())
    }
}

pub fn masked_softmax(scores: [f64; 4], valid: [bool; 4], temperature: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    let best = (0..4)
        .filter(|&i| valid[i])
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let Some(best) = best else {
        // Offline is always valid in practice; keep the function total.
        out[Action::Offline.index()] = 1.0;
        return out;
    };
    if temperature <= 1e-12 {
        out[best] = 1.0;
        return out;
    }
    let m = scores[best];
    let mut z = 0.0;
    for i in 0..4 {
        if valid[i] {
            out[i] = ((scores[i] - m) / temperature).exp();
            z += out[i];
        }
    }
    for p in &mut out {
        *p /= z;
    }
    out
}

/// The unmasked score of every action.
pub fn heuristic_score(policy: &HeuristicPolicy, ctx: &PolicyContext) -> BTreeMap<Action, f64> {
    Action::ALL.iter().copied().zip(policy.scores(ctx)).collect()
}

impl Policy for HeuristicPolicy {
    fn name(&self) -> &'static str {
        "heuristic"
    }

    fn decide(&self, ctx: &PolicyContext, rng: &mut dyn RngCore) -> Result<ActionDecision, PolicyError> {
        let probs = self.probabilities(ctx);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = Action::ALL[probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)];
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                action = Action::ALL[i];
                break;
            }
        }
        Ok(ActionDecision::new(action, self.rationale(ctx, action)))
    }
}
