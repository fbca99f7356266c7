use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::datagen::TrajectoryRecord;
use crate::domain::{Action, Uid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub uid: Uid,
    pub t: u64,
    pub action: Action,
}

impl From<&TrajectoryRecord> for Prediction {
    fn from(r: &TrajectoryRecord) -> Self {
        Prediction {
            uid: r.uid,
            t: r.t,
            action: r.action,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    /// Recall per true action; `None` for actions absent from the truth.
    pub per_class_recall: BTreeMap<Action, Option<f64>>,
    /// Rows are true actions, columns predicted actions, both in
    /// offline, battle, buy, sell order.
    pub confusion: [[u64; 4]; 4],
    /// True action counts over the predicted decision points.
    pub class_distribution: BTreeMap<Action, u64>,
}

/// Fraction of decision points where the predicted action equals the
/// recorded one.
pub fn stepwise_accuracy(
    predictions: &[Prediction],
    truth: &[TrajectoryRecord],
) -> Result<AccuracyReport, AnalyticsError> {
    let index: HashMap<(Uid, u64), Action> = truth.iter().map(|r| ((r.uid, r.t), r.action)).collect();
    let mut seen = HashMap::with_capacity(predictions.len());
    let mut confusion = [[0u64; 4]; 4];
    for p in predictions {
        if seen.insert((p.uid, p.t), ()).is_some() {
            return Err(AnalyticsError::DuplicatePrediction { uid: p.uid, t: p.t });
        }
        let actual = *index
            .get(&(p.uid, p.t))
            .ok_or(AnalyticsError::MissingTruth { uid: p.uid, t: p.t })?;
        confusion[actual.index()][p.action.index()] += 1;
    }
    let total = predictions.len() as u64;
    let correct: u64 = (0..4).map(|i| confusion[i][i]).sum();
    let row = |i: usize| confusion[i].iter().sum::<u64>();
    Ok(AccuracyReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class_recall: Action::ALL
            .iter()
            .map(|a| {
                let n = row(a.index());
                (*a, (n > 0).then(|| confusion[a.index()][a.index()] as f64 / n as f64))
            })
            .collect(),
        class_distribution: Action::ALL.iter().map(|a| (*a, row(a.index()))).collect(),
        confusion,
    })
}

/// Predicts the most frequent recorded action everywhere (ties go to the
/// earlier action).
pub fn majority_predictions(truth: &[TrajectoryRecord]) -> Vec<Prediction> {
    let mut counts = [0u64; 4];
    for r in truth {
        counts[r.action.index()] += 1;
    }
    let best = (0..4).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
    truth
        .iter()
        .map(|r| Prediction {
            uid: r.uid,
            t: r.t,
            action: Action::ALL[best],
        })
        .collect()
}
