//! Control plane: run lifecycle, live interventions, read queries and the
//! event stream.
//!
//! Every run has one runner thread that owns stepping. Commands and
//! interventions take the run lock, so they land between steps. Read
//! queries are recomputed from the config and the committed log, the same
//! way for historical and live steps.

mod http;

pub use http::{router, serve, API_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::analytics::{self, AgentSummary, AnalyticsError, LogReplay, LogView, StatsFrame};
use crate::domain::{AgentState, Credits, Event, EventPayload, PlayerProfile, Uid};
use crate::engine::{RunConfig, Simulation};
use crate::intervention::{InterventionError, InterventionKind, InterventionRequest};
use crate::persistence::{query, EventFilter, PersistenceError, RunStatus, RunStore, StoredRun};

/// Live events buffered per subscriber before it is dropped.
pub const STREAM_BUFFER: usize = 4096;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("illegal transition: {command:?} while {status:?}")]
    IllegalTransition { command: RunControlCommand, status: RunStatus },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error("run {0:?} is read-only")]
    ReadOnly(String),
    #[error("unknown uid {0}")]
    UnknownAgent(Uid),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunControlCommand {
    Start,
    Pause,
    Resume,
    /// Only while paused.
    StepN { n: u64 },
    Stop,
}

/// Body of a create-run request. Exactly one source must be given.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CreateRun {
    #[serde(default)]
    pub config: Option<RunConfig>,
    #[serde(default)]
    pub config_toml: Option<String>,
    /// Name of a built-in config.
    #[serde(default)]
    pub builtin: Option<String>,
}

impl CreateRun {
    pub fn resolve(self) -> Result<RunConfig, ApiError> {
        let bad = |e: &dyn std::fmt::Display| ApiError::InvalidConfig(e.to_string());
        let config = match (self.config, self.config_toml, self.builtin) {
            (Some(c), None, None) => c,
            (None, Some(t), None) => RunConfig::from_toml(&t).map_err(|e| bad(&e))?,
            (None, None, Some(b)) => RunConfig::builtin(&b).ok_or_else(|| bad(&format!("no built-in config {b:?}")))?,
            _ => return Err(bad(&"give exactly one of config, config_toml, builtin")),
        };
        config.validate().map_err(|e| bad(&e))?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub committed_steps: u64,
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionMarker {
    pub intervention_id: u64,
    pub at_step: u64,
    pub kind: InterventionKind,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub run_id: String,
    pub status: RunStatus,
    /// Steps executed so far; the next step to run.
    pub current_step: u64,
    pub total_steps: u64,
    pub steps_per_day: u32,
    pub snapshot_steps: Vec<u64>,
    pub interventions: Vec<InterventionMarker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentsByState {
    pub step: u64,
    pub agents: BTreeMap<AgentState, Vec<AgentSummary>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDetail {
    pub step: u64,
    pub profile: PlayerProfile,
    pub state: AgentState,
    pub balance: Credits,
    pub matches_played: u32,
    pub latest_rationale: Option<String>,
    /// Most recent events about the player, oldest first.
    pub history: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheduled {
    pub intervention_id: u64,
    pub at_step: u64,
}

struct RunInner {
    status: RunStatus,
    sim: Option<Simulation>,
    store: Option<RunStore>,
    events: Vec<Event>,
    committed_steps: u64,
    snapshot_steps: Vec<u64>,
    step_budget: u64,
    shutdown: bool,
    error: Option<String>,
}

/// One run known to the control plane.
pub struct RunHandle {
    run_id: String,
    config: RunConfig,
    inner: Mutex<RunInner>,
    wake: Condvar,
    /// Dropped when the runner exits, which ends every live stream.
    tx: Mutex<Option<broadcast::Sender<Event>>>,
    runner: Mutex<Option<JoinHandle<()>>>,
}

impl RunHandle {
    fn lock(&self) -> MutexGuard<'_, RunInner> {
        self.inner.lock().expect("run lock poisoned")
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn status(&self) -> RunStatus {
        self.lock().status
    }

    pub fn committed_steps(&self) -> u64 {
        self.lock().committed_steps
    }

    pub fn error(&self) -> Option<String> {
        self.lock().error.clone()
    }

    pub fn summary(&self) -> RunSummary {
        let g = self.lock();
        RunSummary {
            run_id: self.run_id.clone(),
            status: g.status,
            committed_steps: g.committed_steps,
            total_steps: self.config.total_steps(),
        }
    }

    fn set_status(&self, g: &mut RunInner, status: RunStatus) {
        g.status = status;
        if let Some(store) = g.store.as_mut() {
            if let Err(e) = store.set_status(status) {
                tracing::warn!(run = %self.run_id, error = %e, "could not persist status");
            }
        }
    }

    pub fn control(&self, command: RunControlCommand) -> Result<RunStatus, ApiError> {
        use RunControlCommand::*;
        use RunStatus::*;
        let mut g = self.lock();
        let illegal = |status| Err(ApiError::IllegalTransition { command, status });
        let next = match (command, g.status) {
            (_, s) if g.sim.is_none() && s.is_terminal() => return illegal(s),
            (Start, Created) => Running,
            (Pause, Running) => Paused,
            (Resume, Paused) => Running,
            (StepN { n }, Paused) => {
                g.step_budget += n;
                Paused
            }
            (Stop, s) if !s.is_terminal() => Finished,
            (_, s) => return illegal(s),
        };
        if next != g.status {
            self.set_status(&mut g, next);
        }
        if next == Finished {
            g.shutdown = true;
        }
        drop(g);
        self.wake.notify_all();
        Ok(next)
    }

    pub fn intervene(&self, req: InterventionRequest) -> Result<Scheduled, ApiError> {
        let mut g = self.lock();
        let sim = g.sim.as_mut().ok_or_else(|| ApiError::ReadOnly(self.run_id.clone()))?;
        let id = sim.schedule(req)?;
        let at_step = sim.world().timeline.get(id).expect("just scheduled").at_step;
        Ok(Scheduled {
            intervention_id: id,
            at_step,
        })
    }

    fn with_view<T>(&self, f: impl FnOnce(LogView) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let g = self.lock();
        f(LogView::new(&self.config, &g.events, g.committed_steps))
    }

    /// Defaults to the latest committed step.
    fn pick_step(&self, view: &LogView, step: Option<u64>) -> Result<u64, ApiError> {
        let s = match step {
            Some(s) => s,
            None => view.committed_steps.checked_sub(1).ok_or(AnalyticsError::StepNotReached {
                step: 0,
                committed: 0,
            })?,
        };
        view.check_step(s)?;
        Ok(s)
    }

    pub fn timeline(&self) -> Timeline {
        let g = self.lock();
        let mut interventions: Vec<InterventionMarker> = match &g.sim {
            Some(sim) => sim
                .world()
                .timeline
                .all()
                .map(|iv| InterventionMarker {
                    intervention_id: iv.intervention_id,
                    at_step: iv.at_step,
                    kind: iv.kind.clone(),
                    applied: sim.world().timeline.is_applied(iv.intervention_id),
                })
                .collect(),
            None => g
                .events
                .iter()
                .filter_map(|e| match &e.payload {
                    EventPayload::InterventionApplied { intervention_id, change } => Some(InterventionMarker {
                        intervention_id: *intervention_id,
                        at_step: e.step.abs_step,
                        kind: change.clone(),
                        applied: true,
                    }),
                    _ => None,
                })
                .collect(),
        };
        interventions.sort_by_key(|m| (m.at_step, m.intervention_id));
        Timeline {
            run_id: self.run_id.clone(),
            status: g.status,
            current_step: g.committed_steps,
            total_steps: self.config.total_steps(),
            steps_per_day: self.config.steps_per_day,
            snapshot_steps: g.snapshot_steps.clone(),
            interventions,
        }
    }

    pub fn stats(&self, step: Option<u64>, window: Option<u64>) -> Result<StatsFrame, ApiError> {
        let window = window.unwrap_or(self.config.steps_per_day as u64);
        self.with_view(|v| {
            let s = self.pick_step(&v, step)?;
            Ok(analytics::compute_frame(&v, s, window)?)
        })
    }

    pub fn agents_by_state(&self, step: Option<u64>, state: Option<AgentState>) -> Result<AgentsByState, ApiError> {
        self.with_view(|v| {
            let s = self.pick_step(&v, step)?;
            let mut agents = analytics::agents_by_state(&v, s)?;
            if let Some(state) = state {
                agents.retain(|k, _| *k == state);
            }
            Ok(AgentsByState { step: s, agents })
        })
    }

    pub fn agent_detail(&self, uid: Uid, step: Option<u64>) -> Result<AgentDetail, ApiError> {
        self.with_view(|v| {
            let s = self.pick_step(&v, step)?;
            let r = LogReplay::at(&v, s)?;
            let a = r.agent(uid).ok_or(ApiError::UnknownAgent(uid))?;
            let filter = EventFilter {
                uid: Some(uid),
                to_step: Some(s + 1),
                ..Default::default()
            };
            let mut history: Vec<Event> = query(v.events, &filter).cloned().collect();
            let keep = self.config.history_len;
            if history.len() > keep {
                history.drain(..history.len() - keep);
            }
            Ok(AgentDetail {
                step: s,
                profile: a.profile.clone(),
                state: a.state,
                balance: a.balance,
                matches_played: a.matches_played,
                latest_rationale: a.latest_rationale.clone(),
                history,
            })
        })
    }

    pub fn query(&self, filter: &EventFilter) -> Vec<Event> {
        let g = self.lock();
        query(&g.events, filter).cloned().collect()
    }

    /// Committed events from `from_seq` on, plus a receiver for everything
    /// committed afterwards. Taken under the run lock so nothing is missed
    /// or repeated between the two.
    pub fn subscribe(&self, from_seq: u64) -> (Vec<Event>, broadcast::Receiver<Event>) {
        let g = self.lock();
        let start = g.events.partition_point(|e| e.seq < from_seq);
        let rx = match self.tx.lock().expect("sender lock").as_ref() {
            Some(tx) => tx.subscribe(),
            None => broadcast::channel(1).1,
        };
        (g.events[start..].to_vec(), rx)
    }

    /// Blocks until the run stops stepping (finished, failed or shut down).
    pub fn join(&self) {
        if let Some(h) = self.runner.lock().expect("runner lock").take() {
            let _ = h.join();
        }
    }

    /// Blocks until at least `steps` steps are committed or the runner
    /// stops; returns the committed count.
    pub fn wait_for_step(&self, steps: u64, timeout: Duration) -> u64 {
        let deadline = Instant::now() + timeout;
        let mut g = self.lock();
        while g.committed_steps < steps && !g.shutdown && !g.status.is_terminal() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            g = self.wake.wait_timeout(g, left).expect("run lock poisoned").0;
        }
        g.committed_steps
    }

    fn run_loop(self: Arc<Self>) {
        let mut started: Option<(Instant, u64)> = None;
        loop {
            let mut g = self.lock();
            while !g.shutdown && g.status != RunStatus::Running && g.step_budget == 0 {
                started = None;
                g = self.wake.wait(g).expect("run lock poisoned");
            }
            if g.shutdown {
                break;
            }
            let budgeted = g.status != RunStatus::Running;
            let inner = &mut *g;
            let sim = inner.sim.as_mut().expect("live runs have a simulation");
            let t = sim.now();
            let result = sim.step().map_err(PersistenceError::from).and_then(|events| {
                if let Some(store) = inner.store.as_mut() {
                    store.record_step(sim, t, &events)?;
                }
                Ok(events)
            });
            match result {
                Ok(events) => {
                    if let Some(tx) = self.tx.lock().expect("sender lock").as_ref() {
                        for e in &events {
                            let _ = tx.send(e.clone());
                        }
                    }
                    g.events.extend(events);
                    g.committed_steps = t + 1;
                    let snaps = g.store.as_ref().map(|s| s.record().snapshots.iter().map(|m| m.step).collect());
                    if let Some(snaps) = snaps {
                        g.snapshot_steps = snaps;
                    }
                    if budgeted {
                        g.step_budget -= 1;
                    }
                    if g.sim.as_ref().is_some_and(|s| s.is_finished()) {
                        self.set_status(&mut g, RunStatus::Finished);
                        g.shutdown = true;
                    }
                }
                Err(e) => {
                    tracing::error!(run = %self.run_id, error = %e, "run failed");
                    g.error = Some(e.to_string());
                    self.set_status(&mut g, RunStatus::Failed);
                    g.shutdown = true;
                }
            }
            let pace = (!budgeted && self.config.time_acceleration > 0.0).then_some(self.config.time_acceleration);
            drop(g);
            self.wake.notify_all();
            if let Some(secs_per_step) = pace {
                let (t0, n0) = *started.get_or_insert((Instant::now(), t));
                let due = t0 + Duration::from_secs_f64(secs_per_step * (t + 1 - n0) as f64);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
        }
        self.tx.lock().expect("sender lock").take();
        self.wake.notify_all();
    }
}

/// Registry of runs under one root directory.
pub struct ControlPlane {
    root: Option<PathBuf>,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
}

impl ControlPlane {
    /// Runs are persisted under `root`; `None` keeps everything in memory.
    pub fn new(root: Option<PathBuf>) -> Arc<Self> {
        Arc::new(ControlPlane {
            root,
            runs: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<RunHandle>, ApiError> {
        self.runs
            .read()
            .expect("registry poisoned")
            .get(run_id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownRun(run_id.into()))
    }

    pub fn list(&self) -> Vec<RunSummary> {
        self.runs.read().expect("registry poisoned").values().map(|h| h.summary()).collect()
    }

    fn unique_id(&self, wanted: &str) -> String {
        let runs = self.runs.read().expect("registry poisoned");
        let taken = |id: &str| runs.contains_key(id) || self.root.as_ref().is_some_and(|r| r.join(id).exists());
        if !taken(wanted) {
            return wanted.to_string();
        }
        (2..).map(|i| format!("{wanted}-{i}")).find(|id| !taken(id)).expect("unbounded")
    }

    /// Creates a run in the `Created` state.
    pub fn create(&self, req: CreateRun) -> Result<String, ApiError> {
        let mut config = req.resolve()?;
        config.run_id = self.unique_id(&config.run_id);
        let sim = Simulation::new(config.clone()).map_err(|e| ApiError::InvalidConfig(e.to_string()))?;
        let store = match &self.root {
            Some(root) => Some(RunStore::create(&root.join(&config.run_id), &sim)?),
            None => None,
        };
        let snapshot_steps = if store.is_some() { vec![0] } else { Vec::new() };
        let inner = RunInner {
            status: RunStatus::Created,
            sim: Some(sim),
            store,
            events: Vec::new(),
            committed_steps: 0,
            snapshot_steps,
            step_budget: 0,
            shutdown: false,
            error: None,
        };
        Ok(self.register(config, inner))
    }

    /// Loads a run directory. Finished runs are served read-only; others
    /// are rebuilt from their latest snapshot, re-executed up to the last
    /// committed step, and left paused.
    pub fn load(&self, dir: &Path) -> Result<String, ApiError> {
        let stored = StoredRun::open(dir)?;
        let config = stored.record.config.clone();
        if self.runs.read().expect("registry poisoned").contains_key(&config.run_id) {
            return Err(ApiError::InvalidConfig(format!("run {} already loaded", config.run_id)));
        }
        let committed = stored.log.committed_steps;
        let inner = if stored.record.status == RunStatus::Finished || committed >= config.total_steps() {
            RunInner {
                status: RunStatus::Finished,
                sim: None,
                store: None,
                snapshot_steps: stored.record.snapshots.iter().map(|s| s.step).collect(),
                events: stored.log.events,
                committed_steps: committed,
                step_budget: 0,
                shutdown: true,
                error: None,
            }
        } else {
            let (mut store, mut sim) = RunStore::resume(dir, None)?;
            let mut events = stored
                .log
                .events
                .iter()
                .take_while(|e| e.step.abs_step < sim.now())
                .cloned()
                .collect::<Vec<_>>();
            while sim.now() < committed {
                let t = sim.now();
                let evs = sim.step().map_err(PersistenceError::from)?;
                store.record_step(&sim, t, &evs)?;
                events.extend(evs);
            }
            if store.record().status != RunStatus::Paused {
                let _ = store.set_status(RunStatus::Paused);
            }
            RunInner {
                status: RunStatus::Paused,
                snapshot_steps: store.record().snapshots.iter().map(|s| s.step).collect(),
                sim: Some(sim),
                store: Some(store),
                events,
                committed_steps: committed,
                step_budget: 0,
                shutdown: false,
                error: None,
            }
        };
        Ok(self.register(config, inner))
    }

    fn register(&self, config: RunConfig, inner: RunInner) -> String {
        let run_id = config.run_id.clone();
        let live = !inner.shutdown;
        let tx = live.then(|| broadcast::channel(STREAM_BUFFER).0);
        let handle = Arc::new(RunHandle {
            run_id: run_id.clone(),
            config,
            inner: Mutex::new(inner),
            wake: Condvar::new(),
            tx: Mutex::new(tx),
            runner: Mutex::new(None),
        });
        if live {
            let h = handle.clone();
            let join = std::thread::Builder::new()
                .name(format!("run-{run_id}"))
                .spawn(move || h.run_loop())
                .expect("spawn runner thread");
            *handle.runner.lock().expect("runner lock") = Some(join);
        }
        self.runs.write().expect("registry poisoned").insert(run_id.clone(), handle);
        run_id
    }

    /// Stops every runner thread.
    pub fn shutdown(&self) {
        let runs: Vec<_> = self.runs.read().expect("registry poisoned").values().cloned().collect();
        for h in runs {
            h.lock().shutdown = true;
            h.wake.notify_all();
            h.join();
        }
    }
}
