//! Synthetic ground truth: populations drawn from the five clusters, season
//! match logs drawn from known curves, and decision trajectory corpora.

mod trajectory;

pub use trajectory::{export_trajectories, read_corpus, replay_day, write_corpus, CorpusHeader, TrajectoryFeatures, TrajectoryRecord};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battle::{BattleModel, ClassModel, IncomeBin, IncomeCurve, MatchRecord, WinBin, WinCurve};
use crate::domain::{PlayerProfile, ProfileClass, Uid};
use crate::rng::{stream, Domain};

const DEFAULT_CLUSTERS: &str = include_str!("../../assets/clusters.toml");

/// Bins carried by a model built directly from the true curves.
const TRUE_MODEL_BINS: u32 = 200;
const TRUE_MODEL_BIN_COUNT: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("log does not reach day {0}")]
    StepNotReached(u32),
    #[error(transparent)]
    Replay(#[from] crate::analytics::AnalyticsError),
    #[error("re-run failed: {0}")]
    Rerun(String),
}

/// Normal(mean, spread) clamped to `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDist {
    pub mean: f64,
    pub spread: f64,
    pub min: f64,
    pub max: f64,
}

impl FieldDist {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mean + self.spread * z).clamp(self.min, self.max)
    }

    fn check(&self, name: &str, lo: f64, hi: f64) -> Result<(), DatagenError> {
        let ok = self.spread >= 0.0
            && self.min <= self.max
            && self.min >= lo
            && self.max <= hi
            && self.mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DatagenError::InvalidSpec(format!("{name}: {self:?} outside [{lo}, {hi}]")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueWinCurve {
    pub p0: f64,
    pub p_inf: f64,
    pub tau: f64,
}

impl TrueWinCurve {
    pub fn p(&self, n: u32) -> f64 {
        self.p0 + (self.p_inf - self.p0) * (1.0 - (-(n as f64) / self.tau).exp())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueIncomeCurve {
    pub base: f64,
    pub growth: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl TrueIncomeCurve {
    pub fn median(&self, n: u32) -> f64 {
        self.base * (1.0 + self.growth * (1.0 - (-(n as f64) / self.tau).exp()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub class: ProfileClass,
    pub mix_weight: f64,
    /// Multiplies outcome noise (win jitter and income sigma).
    pub noise_scale: f64,
    pub skill: FieldDist,
    pub frustration_tolerance: FieldDist,
    pub spend_propensity: FieldDist,
    pub activeness: FieldDist,
    pub session_length_mean: FieldDist,
    pub habit_informal_trade: FieldDist,
    pub win_curve: TrueWinCurve,
    pub income_curve: TrueIncomeCurve,
}

impl ClusterSpec {
    pub fn income_sigma(&self) -> f64 {
        self.income_curve.sigma * self.noise_scale
    }

    /// Expected income of match `n` under the generator.
    pub fn true_mean_income(&self, n: u32) -> f64 {
        let s = self.income_sigma();
        self.income_curve.median(n) * (0.5 * s * s).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub version: u32,
    pub win_jitter: f64,
    #[serde(rename = "cluster")]
    pub clusters: Vec<ClusterSpec>,
}

impl Default for ClusterTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CLUSTERS).expect("bundled cluster table is valid")
    }
}

impl ClusterTable {
    pub fn from_toml(text: &str) -> Result<Self, DatagenError> {
        let t: ClusterTable = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        for class in ProfileClass::ALL {
            let n = self.clusters.iter().filter(|c| c.class == class).count();
            if n != 1 {
                return Err(DatagenError::InvalidSpec(format!("class {class} appears {n} times")));
            }
        }
        if self.clusters.len() != ProfileClass::ALL.len() {
            return Err(DatagenError::InvalidSpec("expected exactly five clusters".into()));
        }
        let total: f64 = self.clusters.iter().map(|c| c.mix_weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.clusters.iter().any(|c| c.mix_weight < 0.0) {
            return Err(DatagenError::InvalidSpec(format!("mix weights sum to {total}")));
        }
        if !(0.0..0.5).contains(&self.win_jitter) {
            return Err(DatagenError::InvalidSpec("win_jitter must be in [0, 0.5)".into()));
        }
        for c in &self.clusters {
            c.skill.check("skill", 0.0, 1.0)?;
            c.frustration_tolerance.check("frustration_tolerance", 0.0, 1.0)?;
            c.spend_propensity.check("spend_propensity", 0.0, 1.0)?;
            c.activeness.check("activeness", 0.0, 1.0)?;
            c.habit_informal_trade.check("habit_informal_trade", 0.0, 1.0)?;
            c.session_length_mean.check("session_length_mean", 1.0, f64::MAX)?;
            let w = &c.win_curve;
            let i = &c.income_curve;
            if !(0.0..=1.0).contains(&w.p0) || !(0.0..=1.0).contains(&w.p_inf) || w.tau <= 0.0 {
                return Err(DatagenError::InvalidSpec(format!("{}: bad win curve", c.class)));
            }
            if i.base <= 0.0 || i.tau <= 0.0 || i.sigma < 0.0 || i.growth <= -1.0 || c.noise_scale < 0.0 {
                return Err(DatagenError::InvalidSpec(format!("{}: bad income curve", c.class)));
            }
        }
        Ok(())
    }

    pub fn get(&self, class: ProfileClass) -> &ClusterSpec {
        self.clusters
            .iter()
            .find(|c| c.class == class)
            .expect("validated table has every class")
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    /// A battle model that reproduces the generator curves exactly for the
    /// first bins and extrapolates with a straight-line fit beyond them.
    pub fn true_model(&self) -> BattleModel {
        let classes = self
            .clusters
            .iter()
            .map(|c| {
                let ns: Vec<u32> = (1..=TRUE_MODEL_BINS).collect();
                let win_bins = ns
                    .iter()
                    .map(|&n| WinBin {
                        n,
                        count: TRUE_MODEL_BIN_COUNT,
                        rate: c.win_curve.p(n),
                    })
                    .collect();
                let sigma = c.income_sigma();
                let income_bins = ns
                    .iter()
                    .map(|&n| IncomeBin {
                        n,
                        count: TRUE_MODEL_BIN_COUNT,
                        log_mean: c.income_curve.median(n).ln(),
                        log_sd: sigma,
                    })
                    .collect();
                let tail: Vec<u32> = (TRUE_MODEL_BINS - 40..=TRUE_MODEL_BINS).collect();
                let (wi, ws) = line_fit(&tail, |n| {
                    let p = c.win_curve.p(n).clamp(1e-6, 1.0 - 1e-6);
                    (p / (1.0 - p)).ln()
                });
                let (li, ls) = line_fit(&tail, |n| c.income_curve.median(n).ln());
                (
                    c.class,
                    ClassModel {
                        win: WinCurve::Logistic {
                            intercept: wi,
                            slope: ws,
                            bins: win_bins,
                        },
                        income: IncomeCurve {
                            log_intercept: li,
                            log_slope: ls,
                            log_sigma: sigma,
                            bins: income_bins,
                        },
                    },
                )
            })
            .collect();
        let mut model = BattleModel::new(classes, crate::battle::FitOptions::default().shrinkage);
        model.fitted_on = format!("clusters:{}", self.content_hash());
        model
    }
}

fn line_fit(xs: &[u32], f: impl Fn(u32) -> f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let my = xs.iter().map(|&x| f(x)).sum::<f64>() / n;
    let sxy: f64 = xs.iter().map(|&x| (x as f64 - mx) * (f(x) - my)).sum();
    let sxx: f64 = xs.iter().map(|&x| (x as f64 - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Largest-remainder apportionment of `n` seats over `weights`. Ties on the
/// fractional part go to the earlier entry.
pub fn apportion(weights: &[f64], n: u32) -> Vec<u32> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Optional population-wide overrides, used by scenario configs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationOverrides {
    /// Replaces every cluster's habit_informal_trade mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub habit_mean: Option<f64>,
    /// Replaces every cluster's habit_informal_trade spread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub habit_spread: Option<f64>,
}

pub fn generate_population(table: &ClusterTable, n: u32, seed: u64) -> Result<Vec<PlayerProfile>, DatagenError> {
    generate_population_with(table, n, seed, &PopulationOverrides::default())
}

pub fn generate_population_with(
    table: &ClusterTable,
    n: u32,
    seed: u64,
    overrides: &PopulationOverrides,
) -> Result<Vec<PlayerProfile>, DatagenError> {
    if n == 0 {
        return Err(DatagenError::InvalidSpec("population size must be at least 1".into()));
    }
    table.validate()?;
    let weights: Vec<f64> = ProfileClass::ALL.iter().map(|c| table.get(*c).mix_weight).collect();
    let counts = apportion(&weights, n);
    let mut classes: Vec<ProfileClass> = ProfileClass::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(c, k)| std::iter::repeat_n(*c, *k as usize))
        .collect();
    classes.shuffle(&mut stream(seed, Domain::Population, u64::MAX, 0));
    classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let spec = table.get(class);
            let mut rng = stream(seed, Domain::Population, i as u64, 0);
            let mut habit = spec.habit_informal_trade;
            if let Some(m) = overrides.habit_mean {
                habit.mean = m;
            }
            if let Some(s) = overrides.habit_spread {
                habit.spread = s;
            }
            let profile = PlayerProfile {
                uid: Uid(i as u32),
                class,
                skill: spec.skill.sample(&mut rng),
                frustration_tolerance: spec.frustration_tolerance.sample(&mut rng),
                spend_propensity: spec.spend_propensity.sample(&mut rng),
                activeness: spec.activeness.sample(&mut rng),
                session_length_mean: spec.session_length_mean.sample(&mut rng).round().max(1.0) as u32,
                habit_informal_trade: habit.sample(&mut rng),
            };
            profile
                .validate()
                .map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;
            Ok(profile)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonSpec {
    pub players_per_class: u32,
    pub min_matches: u32,
    pub max_matches: u32,
    pub seed: u64,
}

impl Default for SeasonSpec {
    fn default() -> Self {
        SeasonSpec {
            players_per_class: 2_200,
            min_matches: 35,
            max_matches: 40,
            seed: 2025,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeasonLogs {
    pub train: Vec<MatchRecord>,
    pub holdout: Vec<MatchRecord>,
}

pub const TRAIN_SEASON: u32 = 1;
pub const HOLDOUT_SEASON: u32 = 2;

/// Two seasons from the same curves and the same players with independent
/// noise: season 1 for fitting, season 2 for evaluation.
pub fn generate_season_logs(table: &ClusterTable, spec: &SeasonSpec) -> Result<SeasonLogs, DatagenError> {
    if spec.min_matches < 1 || spec.max_matches > 200 || spec.min_matches > spec.max_matches {
        return Err(DatagenError::InvalidSpec(format!(
            "match range [{}, {}] must lie within [1, 200]",
            spec.min_matches, spec.max_matches
        )));
    }
    if spec.players_per_class == 0 {
        return Err(DatagenError::InvalidSpec("players_per_class must be positive".into()));
    }
    table.validate()?;
    Ok(SeasonLogs {
        train: season(table, spec, TRAIN_SEASON),
        holdout: season(table, spec, HOLDOUT_SEASON),
    })
}

fn season(table: &ClusterTable, spec: &SeasonSpec, season: u32) -> Vec<MatchRecord> {
    let mut out = Vec::new();
    let mut uid = 0u32;
    for class in ProfileClass::ALL {
        let c = table.get(class);
        let jitter = table.win_jitter * c.noise_scale;
        let sigma = c.income_sigma();
        for _ in 0..spec.players_per_class {
            let mut rng = stream(spec.seed, Domain::Season, uid as u64, season as u64);
            let matches = rng.random_range(spec.min_matches..=spec.max_matches);
            let offset = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            for n in 1..=matches {
                let p = (c.win_curve.p(n) + offset).clamp(0.0, 1.0);
                let win = rng.random::<f64>() < p;
                let z: f64 = rng.sample(StandardNormal);
                let income = (c.income_curve.median(n) * (sigma * z).exp()).round().max(0.0) as u64;
                out.push(MatchRecord {
                    season,
                    uid: Uid(uid),
                    class,
                    match_index: n,
                    win,
                    income,
                });
            }
            uid += 1;
        }
    }
    out
}

/// First line of a match-log file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchLogHeader {
    pub format: String,
    pub seed: u64,
    pub spec_hash: String,
    pub season: u32,
    pub records: u64,
}

pub const MATCH_LOG_FORMAT: &str = "mmo-sim/match-log/v1";

pub fn write_match_log(path: &Path, records: &[MatchRecord], seed: u64, spec_hash: &str) -> Result<(), DatagenError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = MatchLogHeader {
        format: MATCH_LOG_FORMAT.into(),
        seed,
        spec_hash: spec_hash.into(),
        season: records.first().map_or(0, |r| r.season),
        records: records.len() as u64,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_match_log(path: &Path) -> Result<(MatchLogHeader, Vec<MatchRecord>), DatagenError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header: MatchLogHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(DatagenError::InvalidSpec(format!("{} is empty", path.display()))),
    };
    if header.format != MATCH_LOG_FORMAT {
        return Err(DatagenError::InvalidSpec(format!("unknown match-log format {}", header.format)));
    }
    let mut records = Vec::with_capacity(header.records as usize);
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, records))
}

/// Per-class counts of a population, in class order.
pub fn class_counts(profiles: &[PlayerProfile]) -> BTreeMap<ProfileClass, u32> {
    let mut m: BTreeMap<ProfileClass, u32> = ProfileClass::ALL.iter().map(|c| (*c, 0)).collect();
    for p in profiles {
        *m.entry(p.class).or_default() += 1;
    }
    m
}
