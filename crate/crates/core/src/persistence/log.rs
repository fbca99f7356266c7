use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PersistenceError;
use crate::domain::{Event, Uid};

pub const LOG_FORMAT: &str = "mmo-sim/event-log/v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub config_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub run_id: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    log_header: LogHeader,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Commit {
    step: u64,
    last_seq: u64,
}

#[derive(Serialize, Deserialize)]
struct CommitLine {
    commit: Commit,
}

const HEADER_PREFIX: &str = "{\"log_header\":";
const COMMIT_PREFIX: &str = "{\"commit\":";

/// The committed prefix of a log file.
#[derive(Clone, Debug, PartialEq)]
pub struct LogContents {
    pub header: LogHeader,
    pub events: Vec<Event>,
    /// Steps whose commit marker made it to disk.
    pub committed_steps: u64,
    /// Byte length of the committed prefix.
    pub committed_len: u64,
    /// Bytes after the last commit marker.
    pub uncommitted_bytes: u64,
}

impl LogContents {
    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.events)
    }
}

/// Hash of the event lines alone, independent of headers and markers.
pub fn content_hash(events: &[Event]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(e.to_line().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Reads the committed prefix; anything after the last commit marker is
/// ignored. When `keep_steps` is given, reading stops after the commit of
/// step `keep_steps - 1`.
fn read_prefix(path: &Path, keep_steps: Option<u64>) -> Result<LogContents, PersistenceError> {
    let total_len = std::fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut pos = r.read_line(&mut line)? as u64;
    if !line.starts_with(HEADER_PREFIX) || !line.ends_with('\n') {
        return Err(PersistenceError::CorruptLog(format!("{}: missing header", path.display())));
    }
    let header = serde_json::from_str::<HeaderLine>(line.trim_end())
        .map_err(|e| PersistenceError::CorruptLog(format!("header: {e}")))?
        .log_header;
    if header.format != LOG_FORMAT {
        return Err(PersistenceError::CorruptLog(format!("unknown log format {}", header.format)));
    }
    let mut committed = LogContents {
        header,
        events: Vec::new(),
        committed_steps: 0,
        committed_len: pos,
        uncommitted_bytes: 0,
    };
    if keep_steps == Some(0) {
        committed.uncommitted_bytes = total_len - pos;
        return Ok(committed);
    }
    let mut pending = Vec::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line)? as u64;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        pos += n;
        let text = line.trim_end();
        if text.starts_with(COMMIT_PREFIX) {
            let Ok(c) = serde_json::from_str::<CommitLine>(text) else { break };
            if pending.last().map_or(committed.events.last().map_or(0, |e: &Event| e.seq), |e: &Event| e.seq)
                != c.commit.last_seq
            {
                return Err(PersistenceError::CorruptLog(format!(
                    "commit for step {} claims seq {}",
                    c.commit.step, c.commit.last_seq
                )));
            }
            committed.events.append(&mut pending);
            committed.committed_steps = c.commit.step + 1;
            committed.committed_len = pos;
            if keep_steps.is_some_and(|k| committed.committed_steps >= k) {
                break;
            }
        } else {
            match Event::from_line(text) {
                Ok(e) => pending.push(e),
                Err(_) => break,
            }
        }
    }
    committed.uncommitted_bytes = total_len - committed.committed_len;
    Ok(committed)
}

/// Reads a log without modifying it.
pub fn read_log(path: &Path) -> Result<LogContents, PersistenceError> {
    read_prefix(path, None)
}

/// Reads a log and cuts off anything after the last commit marker, which
/// is what a crash between flushes leaves behind.
pub fn recover_log(path: &Path) -> Result<LogContents, PersistenceError> {
    let c = read_prefix(path, None)?;
    if c.uncommitted_bytes > 0 {
        OpenOptions::new().write(true).open(path)?.set_len(c.committed_len)?;
    }
    Ok(c)
}

/// Keeps only the events of steps `< steps`.
pub fn truncate_log(path: &Path, steps: u64) -> Result<LogContents, PersistenceError> {
    let c = read_prefix(path, Some(steps))?;
    if c.committed_steps < steps {
        return Err(PersistenceError::CorruptLog(format!(
            "log has {} committed steps, cannot keep {steps}",
            c.committed_steps
        )));
    }
    OpenOptions::new().write(true).open(path)?.set_len(c.committed_len)?;
    Ok(c)
}

/// Single writer over a log file. Events become visible to readers at the
/// next commit, which is written at every step boundary.
pub struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
    next_seq: u64,
    committed_steps: u64,
}

impl EventLog {
    pub fn create(path: &Path, header: LogHeader) -> Result<Self, PersistenceError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &HeaderLine { log_header: header })?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(EventLog {
            path: path.to_path_buf(),
            out,
            next_seq: 1,
            committed_steps: 0,
        })
    }

    /// Reopens an existing log for appending after recovering it.
    pub fn open(path: &Path) -> Result<(Self, LogContents), PersistenceError> {
        let contents = recover_log(path)?;
        let mut f = OpenOptions::new().write(true).open(path)?;
        f.seek(SeekFrom::End(0))?;
        Ok((
            EventLog {
                path: path.to_path_buf(),
                out: BufWriter::new(f),
                next_seq: contents.last_seq() + 1,
                committed_steps: contents.committed_steps,
            },
            contents,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn committed_steps(&self) -> u64 {
        self.committed_steps
    }

    /// Buffers events that continue the sequence; returns the seq range.
    pub fn append(&mut self, events: &[Event]) -> Result<Option<(u64, u64)>, PersistenceError> {
        let Some(first) = events.first() else { return Ok(None) };
        let mut expected = self.next_seq;
        for e in events {
            if e.seq != expected {
                return Err(PersistenceError::SeqGap { expected, found: e.seq });
            }
            expected += 1;
        }
        for e in events {
            self.out.write_all(e.to_line().as_bytes())?;
            self.out.write_all(b"\n")?;
        }
        self.next_seq = expected;
        Ok(Some((first.seq, expected - 1)))
    }

    /// Marks step `step` complete and flushes everything to disk.
    pub fn commit(&mut self, step: u64) -> Result<(), PersistenceError> {
        let c = CommitLine {
            commit: Commit {
                step,
                last_seq: self.next_seq - 1,
            },
        };
        serde_json::to_writer(&mut self.out, &c)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        self.committed_steps = step + 1;
        Ok(())
    }
}

/// Event selection for timeline and drill-down queries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    /// Events about this player, including trades where they are the
    /// counterparty.
    pub uid: Option<Uid>,
    /// First step, inclusive.
    pub from_step: Option<u64>,
    /// Last step, exclusive.
    pub to_step: Option<u64>,
    /// Payload kind name, e.g. `battle_resolved`.
    pub kind: Option<String>,
}

impl EventFilter {
    pub fn matches(&self, e: &Event) -> bool {
        let t = e.step.abs_step;
        self.from_step.is_none_or(|f| t >= f)
            && self.to_step.is_none_or(|to| t < to)
            && self.kind.as_deref().is_none_or(|k| e.payload.kind_name() == k)
            && self.uid.is_none_or(|u| e.concerns(u))
    }
}

/// Matching events in seq order.
pub fn query<'a>(events: &'a [Event], filter: &'a EventFilter) -> impl Iterator<Item = &'a Event> + 'a {
    events.iter().filter(move |e| filter.matches(e))
}
