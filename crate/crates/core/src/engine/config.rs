use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{ClusterTable, DatagenError, PopulationOverrides};
use crate::domain::{Action, Credits, PlayerProfile, ProfileClass, Uid};
use crate::economy::Catalog;
use crate::intervention::{FeatureFlags, InterventionRequest, LiveParams};
use crate::messaging::BridgeConfig;
use crate::policy::HeuristicWeights;

pub const CONFIG_VERSION: u32 = 1;

const DEFAULT_CONFIG: &str = include_str!("../../assets/configs/default.toml");
const BLACK_MARKET_CONFIG: &str = include_str!("../../assets/configs/black_market.toml");

/// Names accepted by [`RunConfig::resolve`] besides file paths.
pub const BUILTIN_CONFIGS: [&str; 2] = ["default", "black_market"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config_version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Population(#[from] DatagenError),
}

/// How a policy kind is realized for an agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Heuristic,
    /// Replays a recorded trajectory corpus.
    Replay { corpus: PathBuf },
    /// Line-delimited JSON over TCP; see the remote policy docs.
    Remote {
        endpoint: String,
        #[serde(default = "default_deadline_ms")]
        deadline_ms: u64,
    },
    /// Always the same action. Mostly for tests.
    Constant { action: Action },
}

fn default_deadline_ms() -> u64 {
    2000
}

/// Policy assignment. `by_uid` wins over `by_class`, which wins over
/// `default`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyBinding {
    #[serde(default = "heuristic")]
    pub default: PolicyKind,
    #[serde(default)]
    pub by_class: BTreeMap<ProfileClass, PolicyKind>,
    /// Keys are uids written as strings (TOML table keys are strings).
    #[serde(default)]
    pub by_uid: BTreeMap<String, PolicyKind>,
}

fn heuristic() -> PolicyKind {
    PolicyKind::Heuristic
}

impl Default for PolicyBinding {
    fn default() -> Self {
        PolicyBinding {
            default: PolicyKind::Heuristic,
            by_class: BTreeMap::new(),
            by_uid: BTreeMap::new(),
        }
    }
}

impl PolicyBinding {
    pub fn kind_for(&self, profile: &PlayerProfile) -> &PolicyKind {
        self.by_uid
            .get(&profile.uid.0.to_string())
            .or_else(|| self.by_class.get(&profile.class))
            .unwrap_or(&self.default)
    }

    pub fn bind_uid(&mut self, uid: Uid, kind: PolicyKind) {
        self.by_uid.insert(uid.0.to_string(), kind);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PopulationConfig {
    /// Drawn from the cluster table.
    Generated {
        size: u32,
        /// Defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Defaults to the bundled cluster table.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clusters: Option<PathBuf>,
        #[serde(default)]
        overrides: PopulationOverrides,
    },
    Explicit { profiles: Vec<PlayerProfile> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomyConfig {
    #[serde(default = "d_initial_balance")]
    pub initial_balance: Credits,
    #[serde(default = "d_initial_reserve")]
    pub initial_reserve: Credits,
    #[serde(default = "d_p_fraud")]
    pub p_fraud: f64,
    #[serde(default = "d_habit_decay")]
    pub habit_decay: f64,
    /// Income multiplier on a win (>= 1).
    #[serde(default = "d_lambda_win")]
    pub lambda_win: f64,
    /// Chance that a won match also drops a loot item.
    #[serde(default = "d_p_loot")]
    pub p_loot: f64,
    /// Chance that a lost match destroys one carried gear item.
    #[serde(default = "d_p_gear_loss")]
    pub p_gear_loss: f64,
    /// Open listings are withdrawn after this many steps.
    #[serde(default = "d_listing_ttl")]
    pub listing_ttl_steps: u64,
    /// Black-market asks are drawn from this fraction range of the NPC price.
    #[serde(default = "d_ask_range")]
    pub ask_fraction: (f64, f64),
    /// Informal side payments, as a fraction range of the NPC price.
    #[serde(default = "d_informal_range")]
    pub informal_fraction: (f64, f64),
    /// Defaults to the bundled catalog.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
}

fn d_initial_balance() -> Credits {
    1_000
}
fn d_initial_reserve() -> Credits {
    1_000_000_000
}
fn d_p_fraud() -> f64 {
    0.15
}
fn d_habit_decay() -> f64 {
    0.7
}
fn d_lambda_win() -> f64 {
    1.0
}
fn d_p_loot() -> f64 {
    0.35
}
fn d_p_gear_loss() -> f64 {
    0.5
}
fn d_listing_ttl() -> u64 {
    48
}
fn d_ask_range() -> (f64, f64) {
    (0.6, 0.95)
}
fn d_informal_range() -> (f64, f64) {
    (0.5, 0.9)
}

impl Default for EconomyConfig {
    fn default() -> Self {
        toml::from_str("").expect("all economy fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub run_id: String,
    pub seed: u64,
    #[serde(default = "d_steps_per_day")]
    pub steps_per_day: u32,
    pub total_days: u32,
    pub population: PopulationConfig,
    #[serde(default = "d_tax_rate")]
    pub tax_rate: f64,
    #[serde(default)]
    pub feature_flags: FeatureFlags,
    #[serde(default = "one")]
    pub battle_duration_steps: u64,
    #[serde(default = "d_inflight")]
    pub max_outbound_inflight: usize,
    #[serde(default)]
    pub policy_binding: PolicyBinding,
    /// Real seconds per simulated step; 0 runs as fast as possible.
    #[serde(default)]
    pub time_acceleration: f64,
    #[serde(default)]
    pub economy: EconomyConfig,
    /// Per-agent event history kept for drill-down views.
    #[serde(default = "d_history_len")]
    pub history_len: usize,
    /// Pre-scheduled interventions; `at_step` is required here.
    #[serde(default)]
    pub interventions: Vec<InterventionRequest>,
    /// Threads used for planning within a step. Logs do not depend on it.
    #[serde(default = "one_usize")]
    pub workers: usize,
    /// Snapshot cadence in days; 0 disables periodic snapshots.
    #[serde(default = "one_u32")]
    pub snapshot_every_days: u32,
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mqtt_bridge: Option<BridgeConfig>,
    /// Fitted battle model file. Without one the cluster true curves are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battle_model: Option<PathBuf>,
    /// Overrides the bundled heuristic weight table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic: Option<HeuristicWeights>,
}

fn d_steps_per_day() -> u32 {
    24
}
fn d_tax_rate() -> f64 {
    0.05
}
fn one() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}
fn one_u32() -> u32 {
    1
}
fn d_inflight() -> usize {
    64
}
fn d_history_len() -> usize {
    32
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Probe {
            config_version: Option<u32>,
        }
        let probe: Probe = toml::from_str(text)?;
        match probe.config_version {
            Some(CONFIG_VERSION) => {}
            Some(found) => {
                return Err(ConfigError::VersionMismatch {
                    found,
                    expected: CONFIG_VERSION,
                })
            }
            None => return Err(ConfigError::Invalid("missing config_version".into())),
        }
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Loads a file and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase_paths(dir);
        }
        Ok(cfg)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "default" => DEFAULT_CONFIG,
            "black_market" => BLACK_MARKET_CONFIG,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("bundled configs are valid"))
    }

    /// A built-in name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ConfigError> {
        match Self::builtin(name_or_path) {
            Some(c) => Ok(c),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    fn rebase_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = self.battle_model.as_mut() {
            fix(p);
        }
        if let Some(p) = self.economy.catalog.as_mut() {
            fix(p);
        }
        if let PopulationConfig::Generated {
            clusters: Some(p), ..
        } = &mut self.population
        {
            fix(p);
        }
        let mut kinds: Vec<&mut PolicyKind> = vec![&mut self.policy_binding.default];
        kinds.extend(self.policy_binding.by_class.values_mut());
        kinds.extend(self.policy_binding.by_uid.values_mut());
        for k in kinds {
            if let PolicyKind::Replay { corpus } = k {
                fix(corpus);
            }
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.total_days as u64 * self.steps_per_day as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.config_version != CONFIG_VERSION {
            return Err(ConfigError::VersionMismatch {
                found: self.config_version,
                expected: CONFIG_VERSION,
            });
        }
        if self.steps_per_day < 1 {
            return bad("steps_per_day must be >= 1".into());
        }
        if self.total_days < 1 {
            return bad("total_days must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.tax_rate) {
            return bad(format!("tax_rate {} outside [0, 1)", self.tax_rate));
        }
        if self.battle_duration_steps < 1 {
            return bad("battle_duration_steps must be >= 1".into());
        }
        if self.max_outbound_inflight < 1 {
            return bad("max_outbound_inflight must be >= 1".into());
        }
        if !(self.time_acceleration >= 0.0 && self.time_acceleration.is_finite()) {
            return bad("time_acceleration must be a non-negative number".into());
        }
        if self.workers < 1 {
            return bad("workers must be >= 1".into());
        }
        match &self.population {
            PopulationConfig::Generated { size: 0, .. } => return bad("population is empty".into()),
            PopulationConfig::Explicit { profiles } => {
                if profiles.is_empty() {
                    return bad("population is empty".into());
                }
                for (i, p) in profiles.iter().enumerate() {
                    if p.uid.0 as usize != i {
                        return bad(format!("explicit profile {i} has uid {}; uids must be 0..n in order", p.uid));
                    }
                    p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
            }
            PopulationConfig::Generated { .. } => {}
        }
        let e = &self.economy;
        for (name, v) in [("p_fraud", e.p_fraud), ("habit_decay", e.habit_decay), ("p_loot", e.p_loot), ("p_gear_loss", e.p_gear_loss)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("economy.{name} {v} outside [0, 1]"));
            }
        }
        if !(e.lambda_win >= 1.0 && e.lambda_win.is_finite()) {
            return bad("economy.lambda_win must be >= 1".into());
        }
        for (name, (lo, hi)) in [("ask_fraction", e.ask_fraction), ("informal_fraction", e.informal_fraction)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("economy.{name} must satisfy 0 < lo <= hi"));
            }
        }
        if e.listing_ttl_steps < 1 {
            return bad("economy.listing_ttl_steps must be >= 1".into());
        }
        for iv in &self.interventions {
            if iv.at_step.is_none() {
                return bad("scheduled interventions need at_step".into());
            }
        }
        if let Some(h) = &self.heuristic {
            h.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    /// Content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn catalog(&self) -> Result<Catalog, ConfigError> {
        match &self.economy.catalog {
            None => Ok(Catalog::default()),
            Some(p) => Catalog::load(p).map_err(|e| ConfigError::Invalid(format!("catalog: {e}"))),
        }
    }

    pub fn cluster_table(&self) -> Result<ClusterTable, ConfigError> {
        match &self.population {
            PopulationConfig::Generated {
                clusters: Some(p), ..
            } => Ok(ClusterTable::load(p)?),
            _ => Ok(ClusterTable::default()),
        }
    }

    /// The concrete population. Generated populations are deterministic in
    /// the seed, so this is stable across calls.
    pub fn profiles(&self) -> Result<Vec<PlayerProfile>, ConfigError> {
        match &self.population {
            PopulationConfig::Explicit { profiles } => Ok(profiles.clone()),
            PopulationConfig::Generated {
                size,
                seed,
                overrides,
                ..
            } => Ok(crate::datagen::generate_population_with(
                &self.cluster_table()?,
                *size,
                seed.unwrap_or(self.seed),
                overrides,
            )?),
        }
    }

    pub fn initial_params(&self, catalog: &Catalog) -> LiveParams {
        LiveParams {
            flags: self.feature_flags,
            tax_rate: self.tax_rate,
            p_fraud: self.economy.p_fraud,
            habit_decay: self.economy.habit_decay,
            lambda_win: self.economy.lambda_win,
            npc_prices: catalog.items.iter().map(|i| (i.item_id, i.npc_price)).collect(),
        }
    }
}

/// Simulation time reached after `wall_elapsed_secs` of real time.
pub fn map_time(wall_elapsed_secs: f64, config: &RunConfig) -> crate::domain::SimTime {
    let last = config.total_steps().saturating_sub(1);
    let abs = if config.time_acceleration > 0.0 {
        ((wall_elapsed_secs / config.time_acceleration).floor().max(0.0) as u64).min(last)
    } else {
        last
    };
    crate::domain::SimTime::from_abs(abs, config.steps_per_day)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_accel(a: f64) -> RunConfig {
        let mut c = RunConfig::builtin("default").unwrap();
        c.time_acceleration = a;
        c
    }

    #[test]
    fn map_time_examples() {
        let t = map_time(0.0, &with_accel(1.0));
        assert_eq!((t.day, t.step_in_day), (0, 0));
        let t = map_time(25.0, &with_accel(1.0));
        assert_eq!((t.day, t.step_in_day), (1, 1));
        let t = map_time(10.0, &with_accel(0.5));
        assert_eq!((t.day, t.step_in_day), (0, 20));
        let c = with_accel(1.0);
        assert_eq!(map_time(1e9, &c).abs_step, c.total_steps() - 1);
    }

    #[test]
    fn builtins_parse_and_round_trip() {
        for name in BUILTIN_CONFIGS {
            let c = RunConfig::builtin(name).unwrap();
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c, "{name}");
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn version_and_bounds_are_checked() {
        let c = RunConfig::builtin("default").unwrap();
        let text = c.to_toml().replace("config_version = 1", "config_version = 9");
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(ConfigError::VersionMismatch { found: 9, .. })
        ));
        let mut bad = c.clone();
        bad.tax_rate = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.steps_per_day = 0;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.population = PopulationConfig::Explicit { profiles: vec![] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_flag_rejected() {
        let c = RunConfig::builtin("default").unwrap();
        let text = c.to_toml().replace("[feature_flags]", "[feature_flags]\nteleport_enabled = true");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn binding_precedence() {
        let mut b = PolicyBinding::default();
        b.by_class.insert(
            ProfileClass::Casual,
            PolicyKind::Constant {
                action: Action::Offline,
            },
        );
        b.bind_uid(
            Uid(3),
            PolicyKind::Constant {
                action: Action::Battle,
            },
        );
        let profiles = RunConfig::builtin("default").unwrap().profiles().unwrap();
        for p in profiles.iter().take(50) {
            let k = b.kind_for(p);
            if p.uid == Uid(3) {
                assert_eq!(k, &PolicyKind::Constant { action: Action::Battle });
            } else if p.class == ProfileClass::Casual {
                assert_eq!(k, &PolicyKind::Constant { action: Action::Offline });
            } else {
                assert_eq!(k, &PolicyKind::Heuristic);
            }
        }
    }
}
