use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::analytics::{LogReplay, LogView};
use crate::domain::{Action, AgentState, Credits, EventPayload, ProfileClass, Uid};
use crate::engine::{PolicyBinding, PolicyKind, Simulation};
use crate::persistence::StoredRun;

pub const CORPUS_FORMAT: &str = "mmo-sim/trajectories/v1";

/// First line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub seed: u64,
    /// Hash of the config the corpus was drawn from.
    pub spec_hash: String,
    pub day: Option<u32>,
    pub records: u64,
}

/// What the player could observe when deciding.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeatures {
    pub balance: Credits,
    pub matches_played: u32,
    pub last_win: Option<bool>,
    pub loss_streak: u32,
    pub broadcasts_pending: u32,
    pub black_market_open: bool,
}

/// One decision point: who, when, from which state, and what they did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub uid: Uid,
    pub t: u64,
    pub day: u32,
    pub step_in_day: u32,
    pub class: ProfileClass,
    pub state: AgentState,
    pub action: Action,
    pub features: TrajectoryFeatures,
}

/// Every decision point of `day`, in log order. Failed session rolls are
/// decision points taken from the offline state.
pub fn export_trajectories(view: &LogView, day: u32) -> Result<(CorpusHeader, Vec<TrajectoryRecord>), DatagenError> {
    let spd = view.config.steps_per_day as u64;
    let end = (day as u64 + 1) * spd;
    if view.committed_steps < end {
        return Err(DatagenError::StepNotReached(day));
    }
    let mut replay = LogReplay::new(view.config)?;
    let mut records = Vec::new();
    for e in view.events.iter().take_while(|e| e.step.abs_step < end) {
        if let (EventPayload::ActionChosen { action, state, .. }, Some(uid), true) =
            (&e.payload, e.uid, e.step.day == day)
        {
            let a = replay
                .agent(uid)
                .ok_or_else(|| DatagenError::InvalidSpec(format!("unknown uid {uid}")))?;
            records.push(TrajectoryRecord {
                uid,
                t: e.step.abs_step,
                day: e.step.day,
                step_in_day: e.step.step_in_day,
                class: a.profile.class,
                state: *state,
                action: *action,
                features: TrajectoryFeatures {
                    balance: a.balance,
                    matches_played: a.matches_played,
                    last_win: a.last_outcomes.back().map(|o| o.win),
                    loss_streak: a.last_outcomes.iter().rev().take_while(|o| !o.win).count() as u32,
                    broadcasts_pending: a.broadcasts_pending,
                    black_market_open: replay.flags().black_market_enabled,
                },
            });
        }
        replay.apply(e)?;
    }
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        seed: view.config.seed,
        spec_hash: view.config.hash(),
        day: Some(day),
        records: records.len() as u64,
    };
    Ok((header, records))
}

/// Re-executes `day` of a stored run with every player bound to the replay
/// policy over `corpus` and exports the re-executed day. Steps before the
/// day run from the nearest earlier snapshot under the original bindings.
pub fn replay_day(run: &StoredRun, day: u32, corpus: &Path) -> Result<(CorpusHeader, Vec<TrajectoryRecord>), DatagenError> {
    let rerun = |e: &dyn std::fmt::Display| DatagenError::Rerun(e.to_string());
    let config = run.config();
    let start = day as u64 * config.steps_per_day as u64;
    let end = start + config.steps_per_day as u64;
    if run.log.committed_steps < end {
        return Err(DatagenError::StepNotReached(day));
    }
    let snap = run.snapshot_at_or_before(start).map_err(|e| rerun(&e))?;
    let model = snap.model.clone();
    let mut sim = snap.restore().map_err(|e| rerun(&e))?;
    sim.advance(start - sim.now()).map_err(|e| rerun(&e))?;

    let mut replay_config = config.clone();
    replay_config.policy_binding = PolicyBinding {
        default: PolicyKind::Replay {
            corpus: corpus.to_path_buf(),
        },
        ..Default::default()
    };
    let mut sim = Simulation::restore(replay_config, sim.into_world(), model).map_err(|e| rerun(&e))?;
    let day_events = sim.advance(end - start).map_err(|e| rerun(&e))?;

    let mut events: Vec<_> = run.log.events.iter().take_while(|e| e.step.abs_step < start).cloned().collect();
    events.extend(day_events);
    export_trajectories(&LogView::new(config, &events, end), day)
}

pub fn write_corpus(path: &Path, header: &CorpusHeader, records: &[TrajectoryRecord]) -> Result<(), DatagenError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = CorpusHeader {
        records: records.len() as u64,
        ..header.clone()
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<(CorpusHeader, Vec<TrajectoryRecord>), DatagenError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header: CorpusHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(DatagenError::InvalidSpec(format!("{} is empty", path.display()))),
    };
    if header.format != CORPUS_FORMAT {
        return Err(DatagenError::InvalidSpec(format!("unknown corpus format {}", header.format)));
    }
    let mut records = Vec::with_capacity(header.records as usize);
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    if records.len() as u64 != header.records {
        return Err(DatagenError::InvalidSpec(format!(
            "header promises {} records, found {}",
            header.records,
            records.len()
        )));
    }
    Ok((header, records))
}
