use std::collections::HashMap;
use std::path::Path;

use rand::RngCore;

use super::{ActionDecision, Policy, PolicyContext, PolicyError};
use crate::datagen::{read_corpus, TrajectoryRecord};
use crate::domain::{Action, AgentState, Uid};

/// Plays back a recorded trajectory corpus step for step.
///
/// A record taken in the offline state is a failed session roll; any other
/// record at a player's session-roll step means the roll succeeded.
#[derive(Clone, Debug, Default)]
pub struct ReplayPolicy {
    decisions: HashMap<(Uid, u64), Action>,
    session_rolls: HashMap<(Uid, u64), bool>,
}

impl ReplayPolicy {
    pub fn new(records: &[TrajectoryRecord]) -> Self {
        let mut p = ReplayPolicy::default();
        for r in records {
            if r.state == AgentState::Offline {
                p.session_rolls.insert((r.uid, r.t), false);
            } else {
                p.decisions.insert((r.uid, r.t), r.action);
                p.session_rolls.entry((r.uid, r.t)).or_insert(true);
            }
        }
        p
    }

    pub fn from_corpus(path: &Path) -> Result<Self, PolicyError> {
        let (_, records) = read_corpus(path).map_err(|e| PolicyError::Setup(e.to_string()))?;
        Ok(Self::new(&records))
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

impl Policy for ReplayPolicy {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn decide(&self, ctx: &PolicyContext, _rng: &mut dyn RngCore) -> Result<ActionDecision, PolicyError> {
        let key = (ctx.profile.uid, ctx.time.abs_step);
        let action = *self.decisions.get(&key).ok_or(PolicyError::NoRecord {
            uid: key.0,
            step: key.1,
        })?;
        Ok(ActionDecision::new(action, format!("{action}: replayed from corpus")))
    }

    fn session_start(&self, uid: Uid, abs_step: u64) -> Option<bool> {
        self.session_rolls.get(&(uid, abs_step)).copied()
    }
}
