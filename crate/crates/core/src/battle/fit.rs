use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BattleError, BattleModel, ClassModel, IncomeBin, IncomeCurve, WinBin, WinCurve};
use crate::domain::{Credits, ProfileClass, Uid};

/// One row of a season match log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub season: u32,
    pub uid: Uid,
    pub class: ProfileClass,
    pub match_index: u32,
    pub win: bool,
    pub income: Credits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub min_bin_count: u64,
    /// Keep only players whose season match count falls in this band.
    pub match_band: Option<(u32, u32)>,
    /// Every class must have bins `1..=required_n` with enough samples.
    pub required_n: u32,
    pub shrinkage: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_bin_count: 30,
            match_band: Some((35, 40)),
            required_n: 35,
            shrinkage: 20.0,
        }
    }
}

/// Order-independent content hash of a record set.
pub fn fingerprint(records: &[MatchRecord]) -> String {
    let mut sorted: Vec<&MatchRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.season, r.uid, r.match_index, r.class, r.win, r.income));
    let mut h = Sha256::new();
    for r in sorted {
        h.update(serde_json::to_vec(r).expect("record serialization is infallible"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Default, Clone, Copy)]
struct Acc {
    count: u64,
    wins: u64,
    sum_log: f64,
    sum_log2: f64,
    sum_income: f64,
}

impl Acc {
    fn push(&mut self, r: &MatchRecord) {
        let l = (r.income.max(1) as f64).ln();
        self.count += 1;
        self.wins += r.win as u64;
        self.sum_log += l;
        self.sum_log2 += l * l;
        self.sum_income += r.income as f64;
    }

    fn rate(&self) -> f64 {
        self.wins as f64 / self.count as f64
    }

    fn log_mean(&self) -> f64 {
        self.sum_log / self.count as f64
    }

    fn log_sd(&self) -> f64 {
        let m = self.log_mean();
        (self.sum_log2 / self.count as f64 - m * m).max(0.0).sqrt()
    }

    fn mean_income(&self) -> f64 {
        self.sum_income / self.count as f64
    }
}

fn in_band(records: &[MatchRecord], band: Option<(u32, u32)>) -> Vec<&MatchRecord> {
    let Some((lo, hi)) = band else {
        return records.iter().collect();
    };
    let mut counts: BTreeMap<(u32, Uid), u32> = BTreeMap::new();
    for r in records {
        *counts.entry((r.season, r.uid)).or_default() += 1;
    }
    records
        .iter()
        .filter(|r| (lo..=hi).contains(&counts[&(r.season, r.uid)]))
        .collect()
}

fn aggregate(records: &[&MatchRecord]) -> BTreeMap<ProfileClass, BTreeMap<u32, Acc>> {
    let mut bins: BTreeMap<ProfileClass, BTreeMap<u32, Acc>> = BTreeMap::new();
    for r in records {
        bins.entry(r.class).or_default().entry(r.match_index).or_default().push(r);
    }
    bins
}

/// Binomial logistic regression of win rate on match index by Newton's
/// method over aggregated bins.
fn fit_logistic(bins: &[(f64, f64, f64)]) -> (f64, f64) {
    // (x, trials, successes)
    let (mut b0, mut b1) = (0.0f64, 0.0f64);
    let ridge = 1e-8;
    for _ in 0..100 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, ridge, 0.0, ridge);
        for &(x, n, y) in bins {
            let p = super::sigmoid(b0 + b1 * x);
            let r = y - n * p;
            let w = n * p * (1.0 - p);
            g0 += r;
            g1 += r * x;
            h00 += w;
            h01 += w * x;
            h11 += w * x * x;
        }
        g0 -= ridge * b0;
        g1 -= ridge * b1;
        let det = h00 * h11 - h01 * h01;
        if det.abs() < 1e-300 {
            break;
        }
        let d0 = (h11 * g0 - h01 * g1) / det;
        let d1 = (h00 * g1 - h01 * g0) / det;
        b0 += d0;
        b1 += d1;
        if d0.abs() < 1e-12 && d1.abs() < 1e-12 {
            break;
        }
    }
    (b0, b1)
}

/// Weighted least squares `y = a + b x`.
fn fit_line(points: &[(f64, f64, f64)]) -> (f64, f64) {
    // (x, y, weight)
    let sw: f64 = points.iter().map(|p| p.2).sum();
    let mx = points.iter().map(|p| p.0 * p.2).sum::<f64>() / sw;
    let my = points.iter().map(|p| p.1 * p.2).sum::<f64>() / sw;
    let sxx: f64 = points.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

/// Fits per-class win and income curves from season match logs.
pub fn fit(records: &[MatchRecord], opts: &FitOptions) -> Result<BattleModel, BattleError> {
    let kept = in_band(records, opts.match_band);
    let agg = aggregate(&kept);
    let mut classes = BTreeMap::new();
    for class in ProfileClass::ALL {
        let empty = BTreeMap::new();
        let bins = agg.get(&class).unwrap_or(&empty);
        for n in 1..=opts.required_n {
            let count = bins.get(&n).map_or(0, |a| a.count);
            if count < opts.min_bin_count {
                return Err(BattleError::InsufficientData {
                    class,
                    n,
                    count,
                    needed: opts.min_bin_count,
                });
            }
        }
        let usable: Vec<(u32, Acc)> = bins
            .iter()
            .filter(|(_, a)| a.count >= opts.min_bin_count)
            .map(|(n, a)| (*n, *a))
            .collect();

        let logistic_input: Vec<(f64, f64, f64)> = usable
            .iter()
            .map(|(n, a)| (*n as f64, a.count as f64, a.wins as f64))
            .collect();
        let (intercept, slope) = fit_logistic(&logistic_input);
        let win = WinCurve::Logistic {
            intercept,
            slope,
            bins: usable
                .iter()
                .map(|(n, a)| WinBin {
                    n: *n,
                    count: a.count,
                    rate: a.rate(),
                })
                .collect(),
        };

        let line_input: Vec<(f64, f64, f64)> = usable
            .iter()
            .map(|(n, a)| (*n as f64, a.log_mean(), a.count as f64))
            .collect();
        let (log_intercept, log_slope) = fit_line(&line_input);
        let total: f64 = usable.iter().map(|(_, a)| a.count as f64).sum();
        let pooled_var: f64 = usable
            .iter()
            .map(|(_, a)| a.count as f64 * a.log_sd().powi(2))
            .sum::<f64>()
            / total;
        let income = IncomeCurve {
            log_intercept,
            log_slope,
            log_sigma: pooled_var.sqrt(),
            bins: usable
                .iter()
                .map(|(n, a)| IncomeBin {
                    n: *n,
                    count: a.count,
                    log_mean: a.log_mean(),
                    log_sd: a.log_sd(),
                })
                .collect(),
        };
        classes.insert(class, ClassModel { win, income });
    }
    let mut model = BattleModel::new(classes, opts.shrinkage);
    model.fitted_on = fingerprint(records);
    model.trained_seasons = records
        .iter()
        .map(|r| r.season)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHoldout {
    /// Mean absolute error between predicted and observed win rate.
    pub win_mae: f64,
    /// Mean relative error between predicted and observed mean income.
    pub income_rel_err: f64,
    pub bins_evaluated: u32,
    pub min_bin_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub holdout_fingerprint: String,
    pub per_class: BTreeMap<ProfileClass, ClassHoldout>,
}

/// Scores a fitted model against a later season. Refuses to score on any
/// record from a season the model was trained on.
pub fn evaluate_holdout(
    model: &BattleModel,
    holdout: &[MatchRecord],
    match_band: Option<(u32, u32)>,
    n_range: RangeInclusive<u32>,
) -> Result<HoldoutReport, BattleError> {
    let fp = fingerprint(holdout);
    if fp == model.fitted_on || holdout.iter().any(|r| model.trained_seasons.contains(&r.season)) {
        return Err(BattleError::DataLeakage);
    }
    let kept = in_band(holdout, match_band);
    let agg = aggregate(&kept);
    let mut per_class = BTreeMap::new();
    for (class, bins) in &agg {
        let cm = model.class(*class)?;
        let (mut win_err, mut inc_err, mut k, mut min_count) = (0.0, 0.0, 0u32, u64::MAX);
        for n in n_range.clone() {
            let Some(a) = bins.get(&n) else { continue };
            let observed_mean = a.mean_income();
            win_err += (cm.win.p(n, model.shrinkage) - a.rate()).abs();
            if observed_mean > 0.0 {
                inc_err += (cm.income.mean(n, model.shrinkage) - observed_mean).abs() / observed_mean;
            }
            k += 1;
            min_count = min_count.min(a.count);
        }
        if k > 0 {
            per_class.insert(
                *class,
                ClassHoldout {
                    win_mae: win_err / k as f64,
                    income_rel_err: inc_err / k as f64,
                    bins_evaluated: k,
                    min_bin_count: min_count,
                },
            );
        }
    }
    Ok(HoldoutReport {
        holdout_fingerprint: fp,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent generator: every class shares `p` and `income(n)`.
    fn synthetic(players_per_class: u32, season: u32, seed: u64, p: f64, income: impl Fn(u32) -> Credits) -> Vec<MatchRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut uid = 0;
        for class in ProfileClass::ALL {
            for _ in 0..players_per_class {
                let matches = rng.random_range(35..=40);
                for n in 1..=matches {
                    out.push(MatchRecord {
                        season,
                        uid: Uid(uid),
                        class,
                        match_index: n,
                        win: rng.random::<f64>() < p,
                        income: income(n),
                    });
                }
                uid += 1;
            }
        }
        out
    }

    #[test]
    fn constant_win_rate_bins_within_tolerance() {
        // 5000 players per class puts 0.03 beyond 4 sigma of every bin.
        let logs = synthetic(5_000, 1, 8, 0.6, |_| 300);
        let m = fit(&logs, &FitOptions::default()).unwrap();
        for class in ProfileClass::ALL {
            for n in 1..=35 {
                let p = m.p_win(class, n).unwrap();
                assert!((p - 0.6).abs() <= 0.03, "class {class} n {n}: {p}");
            }
            let ClassModel { win: WinCurve::Logistic { intercept, slope, .. }, .. } = &m.classes[&class] else {
                panic!("fitted curves are logistic")
            };
            let p20 = super::super::sigmoid(intercept + slope * 20.0);
            assert!((p20 - 0.6).abs() <= 0.01, "parametric p(20) = {p20}");
        }
    }

    #[test]
    fn exact_linear_income_is_recovered() {
        let logs = synthetic(40, 1, 9, 0.5, |n| 500 + 10 * n as Credits);
        let m = fit(&logs, &FitOptions::default()).unwrap();
        for class in ProfileClass::ALL {
            for n in 1..=35 {
                let truth = 500.0 + 10.0 * n as f64;
                let got = m.mean_income(class, n).unwrap();
                assert!((got - truth).abs() / truth <= 0.02, "n {n}: {got} vs {truth}");
            }
        }
    }

    #[test]
    fn empty_class_is_insufficient_data() {
        let logs: Vec<MatchRecord> = synthetic(40, 1, 10, 0.5, |_| 100)
            .into_iter()
            .filter(|r| r.class != ProfileClass::Novice)
            .collect();
        match fit(&logs, &FitOptions::default()) {
            Err(BattleError::InsufficientData { class, n, count, .. }) => {
                assert_eq!((class, n, count), (ProfileClass::Novice, 1, 0));
            }
            other => panic!("expected InsufficientData, got {other:?}"),
        }
    }

    #[test]
    fn band_filter_drops_out_of_band_players() {
        let mut logs = synthetic(40, 1, 11, 0.5, |_| 100);
        // A player with 3 matches that always wins must not move the fit.
        for n in 1..=3 {
            logs.push(MatchRecord {
                season: 1,
                uid: Uid(99_999),
                class: ProfileClass::Casual,
                match_index: n,
                win: true,
                income: 1,
            });
        }
        let a = fit(&logs, &FitOptions::default()).unwrap();
        let b = fit(&logs[..logs.len() - 3], &FitOptions::default()).unwrap();
        assert_eq!(a.classes, b.classes);
    }

    #[test]
    fn fit_ignores_input_order() {
        let logs = synthetic(40, 1, 12, 0.55, |n| 200 + n as Credits);
        let mut rev = logs.clone();
        rev.reverse();
        let a = fit(&logs, &FitOptions::default()).unwrap();
        let b = fit(&rev, &FitOptions::default()).unwrap();
        assert_eq!(a.fitted_on, b.fitted_on);
        for class in ProfileClass::ALL {
            for n in 1..=40 {
                assert!((a.p_win(class, n).unwrap() - b.p_win(class, n).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn holdout_refuses_training_records() {
        let s1 = synthetic(40, 1, 13, 0.5, |_| 100);
        let m = fit(&s1, &FitOptions::default()).unwrap();
        assert!(matches!(
            evaluate_holdout(&m, &s1, Some((35, 40)), 1..=35),
            Err(BattleError::DataLeakage)
        ));
        let s2 = synthetic(40, 2, 14, 0.5, |_| 100);
        let rep = evaluate_holdout(&m, &s2, Some((35, 40)), 1..=35).unwrap();
        assert_ne!(rep.holdout_fingerprint, m.fitted_on);
        assert_eq!(rep.per_class.len(), 5);
        assert!(rep.per_class.values().all(|c| c.income_rel_err < 1e-9));
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let logs = synthetic(40, 1, 15, 0.47, |n| 300 + 3 * n as Credits);
        let m = fit(&logs, &FitOptions::default()).unwrap();
        let text = serde_json::to_string_pretty(&m).unwrap();
        let back = BattleModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        for class in ProfileClass::ALL {
            let a = super::super::predict_curve(&m, class, 40).unwrap();
            let b = super::super::predict_curve(&back, class, 40).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.p_win.to_bits(), y.p_win.to_bits());
                assert_eq!(x.mean_income.to_bits(), y.mean_income.to_bits());
            }
        }
    }
}
