//! On-disk run directories: the append-only event log, periodic snapshots
//! and the run record.
//!
//! ```text
//! <run>/config.toml          config as submitted
//! <run>/run.json             run record (status, manifest)
//! <run>/events.jsonl         header line, event lines, commit markers
//! <run>/manifest.json        snapshot manifest
//! <run>/snapshots/step-XXXXXX.json
//! ```

mod log;

pub use log::{
    content_hash, query, read_log, recover_log, truncate_log, EventFilter, EventLog, LogContents, LogHeader,
    LOG_FORMAT,
};

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::battle::BattleModel;
use crate::domain::Event;
use crate::engine::{ConfigError, EngineError, RunConfig, Simulation, WorldState, CONFIG_VERSION};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("sequence gap: expected seq {expected}, found {found}")]
    SeqGap { expected: u64, found: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("illegal status transition {from:?} -> {to:?}")]
    IllegalTransition { from: RunStatus, to: RunStatus },
    #[error("no snapshot at or before step {0}")]
    NoSnapshot(u64),
    #[error(transparent)]
    Config(Box<ConfigError>),
    #[error(transparent)]
    Engine(Box<EngineError>),
}

impl From<ConfigError> for PersistenceError {
    fn from(e: ConfigError) -> Self {
        PersistenceError::Config(Box::new(e))
    }
}

impl From<EngineError> for PersistenceError {
    fn from(e: EngineError) -> Self {
        PersistenceError::Engine(Box::new(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Created,
    Running,
    Paused,
    Finished,
    Failed,
}

impl RunStatus {
    fn rank(self) -> u8 {
        match self {
            RunStatus::Created => 0,
            RunStatus::Running | RunStatus::Paused => 1,
            RunStatus::Finished | RunStatus::Failed => 2,
        }
    }

    /// Forward only, except that running and paused alternate freely.
    pub fn can_become(self, to: RunStatus) -> bool {
        use RunStatus::*;
        matches!((self, to), (Running, Paused) | (Paused, Running)) || to.rank() > self.rank()
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: u64,
    /// Relative to the run directory.
    pub file: PathBuf,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    /// Relative to the run directory.
    pub log_path: PathBuf,
    pub snapshots: Vec<ManifestEntry>,
}

impl RunRecord {
    pub fn set_status(&mut self, to: RunStatus) -> Result<(), PersistenceError> {
        if !self.status.can_become(to) {
            return Err(PersistenceError::IllegalTransition { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }
}

/// Complete state at a step boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub snapshot_version: u32,
    pub config_version: u32,
    pub step: u64,
    pub config: RunConfig,
    pub world: WorldState,
    pub model: BattleModel,
    /// Hash of the serialized world.
    pub content_hash: String,
}

impl Snapshot {
    pub fn capture(sim: &Simulation) -> Self {
        Snapshot {
            snapshot_version: SNAPSHOT_VERSION,
            config_version: sim.config().config_version,
            step: sim.now(),
            config: sim.config().clone(),
            world: sim.world().clone(),
            model: sim.model().clone(),
            content_hash: world_hash(sim.world()),
        }
    }

    pub fn restore(self) -> Result<Simulation, PersistenceError> {
        Ok(Simulation::restore(self.config, self.world, self.model)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PersistenceError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PersistenceError> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| PersistenceError::CorruptSnapshot(e.to_string()))?;
        for (field, expected) in [("snapshot_version", SNAPSHOT_VERSION), ("config_version", CONFIG_VERSION)] {
            let found = value.get(field).and_then(|v| v.as_u64()).unwrap_or(0) as u32;
            if found != expected {
                return Err(PersistenceError::VersionMismatch { found, expected });
            }
        }
        let snap: Snapshot =
            serde_json::from_value(value).map_err(|e| PersistenceError::CorruptSnapshot(e.to_string()))?;
        if world_hash(&snap.world) != snap.content_hash {
            return Err(PersistenceError::CorruptSnapshot("content hash mismatch".into()));
        }
        if snap.world.now != snap.step {
            return Err(PersistenceError::CorruptSnapshot("world clock disagrees with step".into()));
        }
        Ok(snap)
    }
}

fn world_hash(world: &WorldState) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(world).expect("world serializes")))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "run.json";
pub const LOG_FILE: &str = "events.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Read-only view of a run directory.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub log: LogContents,
}

impl StoredRun {
    pub fn open(dir: &Path) -> Result<Self, PersistenceError> {
        let record: RunRecord = serde_json::from_slice(&std::fs::read(dir.join(RECORD_FILE))?)?;
        let log = read_log(&dir.join(&record.log_path))?;
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            record,
            log,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.record.config
    }

    pub fn view(&self) -> crate::analytics::LogView<'_> {
        crate::analytics::LogView::new(&self.record.config, &self.log.events, self.log.committed_steps)
    }

    /// Latest snapshot taken at or before `step`.
    pub fn snapshot_at_or_before(&self, step: u64) -> Result<Snapshot, PersistenceError> {
        let entry = self
            .record
            .snapshots
            .iter()
            .filter(|s| s.step <= step)
            .max_by_key(|s| s.step)
            .ok_or(PersistenceError::NoSnapshot(step))?;
        Snapshot::load(&self.dir.join(&entry.file))
    }
}

/// Writer side of a run directory. Owns the log writer and the record.
pub struct RunStore {
    dir: PathBuf,
    record: RunRecord,
    log: EventLog,
}

impl RunStore {
    /// Lays out a new run directory for a simulation at step 0 and takes the
    /// step-0 snapshot.
    pub fn create(dir: &Path, sim: &Simulation) -> Result<Self, PersistenceError> {
        std::fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
        let config = sim.config().clone();
        std::fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
        let log = EventLog::create(
            &dir.join(LOG_FILE),
            LogHeader {
                format: LOG_FORMAT.into(),
                config_version: config.config_version,
                seed: config.seed,
                config_hash: config.hash(),
                run_id: config.run_id.clone(),
            },
        )?;
        let mut store = RunStore {
            dir: dir.to_path_buf(),
            record: RunRecord {
                run_id: config.run_id.clone(),
                config,
                status: RunStatus::Created,
                created_at: now_secs(),
                log_path: LOG_FILE.into(),
                snapshots: Vec::new(),
            },
            log,
        };
        store.snapshot(sim)?;
        Ok(store)
    }

    /// Reopens a run from the latest snapshot at or before `at_step` (the
    /// newest one when `None`). The log is cut back to that step so the
    /// continuation appends exactly where the snapshot left off.
    pub fn resume(dir: &Path, at_step: Option<u64>) -> Result<(Self, Simulation), PersistenceError> {
        let stored = StoredRun::open(dir)?;
        let limit = at_step.unwrap_or(u64::MAX).min(stored.log.committed_steps);
        let snap = stored.snapshot_at_or_before(limit)?;
        let step = snap.step;
        let log_path = dir.join(&stored.record.log_path);
        let kept = truncate_log(&log_path, step)?;
        if kept.last_seq() + 1 != snap.world.next_seq {
            return Err(PersistenceError::CorruptSnapshot(format!(
                "snapshot at step {step} expects seq {}, log ends at {}",
                snap.world.next_seq,
                kept.last_seq()
            )));
        }
        let (log, _) = EventLog::open(&log_path)?;
        let mut record = stored.record;
        record.snapshots.retain(|s| s.step <= step);
        if record.status.is_terminal() {
            // A finished run cut back to an earlier step is live again.
            record.status = RunStatus::Paused;
        }
        let store = RunStore {
            dir: dir.to_path_buf(),
            record,
            log,
        };
        store.save_record()?;
        Ok((store, snap.restore()?))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn set_status(&mut self, status: RunStatus) -> Result<(), PersistenceError> {
        if self.record.status != status {
            self.record.set_status(status)?;
            self.save_record()?;
        }
        Ok(())
    }

    fn save_record(&self) -> Result<(), PersistenceError> {
        let tmp = self.dir.join("run.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.record)?)?;
        std::fs::rename(tmp, self.dir.join(RECORD_FILE))?;
        std::fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&self.record.snapshots)?,
        )?;
        Ok(())
    }

    pub fn snapshot(&mut self, sim: &Simulation) -> Result<ManifestEntry, PersistenceError> {
        let snap = Snapshot::capture(sim);
        let file = PathBuf::from(SNAPSHOT_DIR).join(format!("step-{:06}.json", snap.step));
        snap.save(&self.dir.join(&file))?;
        let entry = ManifestEntry {
            step: snap.step,
            file,
            content_hash: snap.content_hash,
        };
        self.record.snapshots.retain(|s| s.step != entry.step);
        self.record.snapshots.push(entry.clone());
        self.save_record()?;
        Ok(entry)
    }

    /// Appends and commits one executed step, snapshotting on the cadence.
    pub fn record_step(&mut self, sim: &Simulation, step: u64, events: &[Event]) -> Result<(), PersistenceError> {
        self.log.append(events)?;
        self.log.commit(step)?;
        self.maybe_snapshot(sim)
    }

    /// Runs up to `n_steps`, persisting each one; the record is marked
    /// finished when the run reaches its end.
    pub fn drive(&mut self, sim: &mut Simulation, n_steps: u64) -> Result<u64, PersistenceError> {
        self.set_status(RunStatus::Running)?;
        let mut done = 0;
        while done < n_steps && !sim.is_finished() {
            let t = sim.now();
            let res = sim
                .step()
                .map_err(PersistenceError::from)
                .and_then(|evs| self.record_step(sim, t, &evs));
            if let Err(e) = res {
                let _ = self.set_status(RunStatus::Failed);
                return Err(e);
            }
            done += 1;
        }
        self.set_status(if sim.is_finished() {
            RunStatus::Finished
        } else {
            RunStatus::Paused
        })?;
        Ok(done)
    }

    /// Snapshots when the simulation sits on a cadence boundary and no
    /// snapshot exists for that step yet.
    pub fn maybe_snapshot(&mut self, sim: &Simulation) -> Result<(), PersistenceError> {
        let every = sim.config().snapshot_every_days as u64 * sim.config().steps_per_day as u64;
        let due = every > 0 && sim.now().is_multiple_of(every);
        if due && !self.record.snapshots.iter().any(|s| s.step == sim.now()) {
            self.snapshot(sim)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::PopulationConfig;
    use std::io::Write;

    fn config(n: u32, days: u32) -> RunConfig {
        let mut c = RunConfig::builtin("default").unwrap();
        c.population = PopulationConfig::Generated {
            size: n,
            seed: None,
            clusters: None,
            overrides: Default::default(),
        };
        c.total_days = days;
        c.steps_per_day = 8;
        c
    }

    fn fresh(dir: &Path, n: u32, days: u32) -> (RunStore, Simulation) {
        let sim = Simulation::new(config(n, days)).unwrap();
        (RunStore::create(dir, &sim).unwrap(), sim)
    }

    #[test]
    fn status_machine() {
        use RunStatus::*;
        assert!(Created.can_become(Running));
        assert!(Running.can_become(Paused) && Paused.can_become(Running));
        assert!(Running.can_become(Finished) && Paused.can_become(Failed));
        assert!(!Finished.can_become(Running));
        assert!(!Running.can_become(Created));
        assert!(!Failed.can_become(Finished));
    }

    #[test]
    fn append_rejects_seq_gap() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut store, mut sim) = fresh(tmp.path(), 10, 1);
        let mut events = sim.step().unwrap();
        events[0].seq += 1;
        let err = store.record_step(&sim, 0, &events).unwrap_err();
        assert!(matches!(err, PersistenceError::SeqGap { expected: 1, found: 2 }), "{err}");
    }

    #[test]
    fn torn_tail_is_dropped_on_recovery() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut store, mut sim) = fresh(tmp.path(), 20, 1);
        store.drive(&mut sim, 3).unwrap();
        let path = tmp.path().join(LOG_FILE);
        let clean = read_log(&path).unwrap();
        let extra = sim.step().unwrap();
        {
            let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
            for e in &extra[..extra.len() / 2] {
                writeln!(f, "{}", e.to_line()).unwrap();
            }
            f.write_all(b"{\"seq\": 99").unwrap();
        }
        let read = read_log(&path).unwrap();
        assert_eq!(read.committed_steps, 3);
        assert_eq!(read.events, clean.events);
        assert!(read.uncommitted_bytes > 0);
        let recovered = recover_log(&path).unwrap();
        assert_eq!(recovered.events, clean.events);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), clean.committed_len);
    }

    #[test]
    fn resume_from_snapshot_matches_uninterrupted_run() {
        let straight = tempfile::tempdir().unwrap();
        let (mut a, mut sa) = fresh(straight.path(), 30, 3);
        a.drive(&mut sa, u64::MAX).unwrap();
        assert_eq!(a.record().status, RunStatus::Finished);

        let split = tempfile::tempdir().unwrap();
        let (mut b, mut sb) = fresh(split.path(), 30, 3);
        b.drive(&mut sb, 13).unwrap();
        drop(b);
        // The newest snapshot is the one at step 8; steps 8..13 are redone.
        let (mut b, mut sb) = RunStore::resume(split.path(), None).unwrap();
        assert_eq!(sb.now(), 8);
        b.drive(&mut sb, u64::MAX).unwrap();

        let la = read_log(&straight.path().join(LOG_FILE)).unwrap();
        let lb = read_log(&split.path().join(LOG_FILE)).unwrap();
        assert_eq!(la.content_hash(), lb.content_hash());
        assert_eq!(sa.world(), sb.world());
        let steps: Vec<u64> = b.record().snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 8, 16, 24]);
    }

    #[test]
    fn snapshot_round_trip_and_version_check() {
        let tmp = tempfile::tempdir().unwrap();
        let mut sim = Simulation::new(config(15, 1)).unwrap();
        sim.advance(5).unwrap();
        let path = tmp.path().join("snap.json");
        Snapshot::capture(&sim).save(&path).unwrap();
        let mut back = Snapshot::load(&path).unwrap().restore().unwrap();
        assert_eq!(back.world(), sim.world());
        assert_eq!(back.advance(3).unwrap(), sim.advance(3).unwrap());

        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        v["snapshot_version"] = 99.into();
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(
            Snapshot::load(&path),
            Err(PersistenceError::VersionMismatch { found: 99, expected: SNAPSHOT_VERSION })
        ));
    }

    #[test]
    fn tampered_snapshot_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let sim = Simulation::new(config(5, 1)).unwrap();
        let path = tmp.path().join("snap.json");
        let mut snap = Snapshot::capture(&sim);
        snap.world.next_seq += 1;
        snap.save(&path).unwrap();
        assert!(matches!(Snapshot::load(&path), Err(PersistenceError::CorruptSnapshot(_))));
    }

    #[test]
    fn filters_select_by_uid_range_and_kind() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut store, mut sim) = fresh(tmp.path(), 20, 1);
        store.drive(&mut sim, 8).unwrap();
        let log = read_log(&tmp.path().join(LOG_FILE)).unwrap();
        let f = EventFilter {
            uid: Some(crate::domain::Uid(3)),
            from_step: Some(2),
            to_step: Some(6),
            kind: Some("action_chosen".into()),
        };
        let hits: Vec<&Event> = query(&log.events, &f).collect();
        assert!(hits.iter().all(|e| {
            e.uid == Some(crate::domain::Uid(3))
                && (2..6).contains(&e.step.abs_step)
                && e.payload.kind_name() == "action_chosen"
        }));
        let expected = log
            .events
            .iter()
            .filter(|e| e.uid == Some(crate::domain::Uid(3)) && (2..6).contains(&e.step.abs_step))
            .filter(|e| e.payload.kind_name() == "action_chosen")
            .count();
        assert_eq!(hits.len(), expected);
        assert_eq!(query(&log.events, &EventFilter::default()).count(), log.events.len());
    }

    #[test]
    fn record_refuses_illegal_status() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut store, mut sim) = fresh(tmp.path(), 5, 1);
        store.drive(&mut sim, u64::MAX).unwrap();
        assert!(matches!(
            store.set_status(RunStatus::Running),
            Err(PersistenceError::IllegalTransition { .. })
        ));
    }
}
