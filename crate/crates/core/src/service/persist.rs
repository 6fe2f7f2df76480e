//! Append-only, hash-chained room logs plus periodic state snapshots.
//!
//! A log file is a header line `TTMLOG <version> <room spec JSON>` followed by
//! one JSON record per state change (join, accepted action, election tally).
//! Each record carries the post-state hash and a chain hash over the previous
//! chain and the record body, so edits anywhere in the file are detected.
//! A snapshot file is `TTMSNAP <version>` and one JSON line holding the room
//! state at a given record.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{ActionOutcome, EngineError, Room, RoomEntry, RoomSpec, RoomState};
use crate::sentiment::SentimentScorer;

pub const LOG_MAGIC: &str = "TTMLOG";
pub const SNAPSHOT_MAGIC: &str = "TTMSNAP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a {what} file of version {FORMAT_VERSION}")]
    BadHeader { path: PathBuf, what: &'static str },
    #[error("{path}:{line}: corrupt log: {reason}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("room id `{0}` must be 1-64 characters of [A-Za-z0-9_-]")]
    InvalidRoomId(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn valid_room_id(room_id: &str) -> bool {
    (1..=64).contains(&room_id.len())
        && room_id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

pub fn log_path(dir: &Path, room_id: &str) -> Result<PathBuf, PersistError> {
    if !valid_room_id(room_id) {
        return Err(PersistError::InvalidRoomId(room_id.to_owned()));
    }
    Ok(dir.join(format!("{room_id}.log")))
}

pub fn snapshot_path(dir: &Path, room_id: &str) -> Result<PathBuf, PersistError> {
    if !valid_room_id(room_id) {
        return Err(PersistError::InvalidRoomId(room_id.to_owned()));
    }
    Ok(dir.join(format!("{room_id}.snap")))
}

/// One line of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub entry: RoomEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ActionOutcome>,
    pub state_hash: String,
    pub chain: String,
}

#[derive(Serialize)]
struct RecordBody<'a> {
    seq: u64,
    entry: &'a RoomEntry,
    #[serde(skip_serializing_if = "Option::is_none")]
    outcome: Option<&'a ActionOutcome>,
    state_hash: &'a str,
}

fn chain_hash(prev: &str, body: &RecordBody<'_>) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(serde_json::to_vec(body).expect("record serializes"));
    hex::encode(h.finalize())
}

fn header_line(spec: &RoomSpec) -> String {
    let spec = serde_json::to_string(spec).expect("room spec serializes");
    format!("{LOG_MAGIC} {FORMAT_VERSION} {spec}")
}

fn genesis(header: &str) -> String {
    hex::encode(Sha256::digest(header.as_bytes()))
}

/// Writer half of a log. Every append is a single `write` of a full line.
#[derive(Debug)]
pub struct RoomLog {
    path: PathBuf,
    file: File,
    seq: u64,
    chain: String,
}

impl RoomLog {
    /// Starts a new log; refuses to overwrite an existing file.
    pub fn create(path: &Path, spec: &RoomSpec) -> Result<Self, PersistError> {
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(io_err(path))?;
        let header = header_line(spec);
        file.write_all(format!("{header}\n").as_bytes())
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            seq: 0,
            chain: genesis(&header),
        })
    }

    /// Reopens a verified log for appending, cutting off any torn tail.
    fn resume(path: &Path, contents: &LogContents) -> Result<Self, PersistError> {
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        file.set_len(contents.valid_len).map_err(io_err(path))?;
        let mut file = file;
        io::Seek::seek(&mut file, io::SeekFrom::End(0)).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            seq: contents.records.len() as u64,
            chain: contents.head().to_owned(),
        })
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn chain(&self) -> &str {
        &self.chain
    }

    pub fn append(
        &mut self,
        entry: &RoomEntry,
        outcome: Option<&ActionOutcome>,
        state_hash: &str,
    ) -> Result<LogRecord, PersistError> {
        let seq = self.seq + 1;
        let body = RecordBody {
            seq,
            entry,
            outcome,
            state_hash,
        };
        let chain = chain_hash(&self.chain, &body);
        let record = LogRecord {
            seq,
            entry: entry.clone(),
            outcome: outcome.cloned(),
            state_hash: state_hash.to_owned(),
            chain,
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(io_err(&self.path))?;
        self.seq = seq;
        self.chain.clone_from(&record.chain);
        Ok(record)
    }
}

/// A parsed and chain-verified log.
#[derive(Debug, Clone)]
pub struct LogContents {
    pub spec: RoomSpec,
    pub genesis: String,
    pub records: Vec<LogRecord>,
    /// Byte length up to and including the last complete record.
    pub valid_len: u64,
    /// Whether an incomplete final line was dropped.
    pub truncated: bool,
}

impl LogContents {
    /// Chain hash after the last record.
    pub fn head(&self) -> &str {
        self.records.last().map_or(&self.genesis, |r| &r.chain)
    }

    fn chain_at(&self, seq: u64) -> &str {
        match seq {
            0 => &self.genesis,
            n => &self.records[n as usize - 1].chain,
        }
    }
}

pub fn read_log(path: &Path) -> Result<LogContents, PersistError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |line: usize, reason: String| PersistError::CorruptLog {
        path: path.to_owned(),
        line,
        reason,
    };
    let bad_header = || PersistError::BadHeader {
        path: path.to_owned(),
        what: "room log",
    };

    let header_end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(bad_header)?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad_header())?;
    let mut parts = header.splitn(3, ' ');
    if parts.next() != Some(LOG_MAGIC) || parts.next() != Some(&FORMAT_VERSION.to_string()) {
        return Err(bad_header());
    }
    let spec: RoomSpec = parts
        .next()
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(bad_header)?;

    let genesis = genesis(header);
    let mut chain = genesis.clone();
    let mut records = Vec::new();
    let mut pos = header_end + 1;
    let mut line_no = 1;
    let mut truncated = false;
    while pos < bytes.len() {
        line_no += 1;
        let Some(len) = bytes[pos..].iter().position(|b| *b == b'\n') else {
            truncated = true;
            break;
        };
        let line = &bytes[pos..pos + len];
        let record: LogRecord = serde_json::from_slice(line)
            .map_err(|e| corrupt(line_no, format!("unreadable record: {e}")))?;
        let expected_seq = records.len() as u64 + 1;
        if record.seq != expected_seq {
            return Err(corrupt(
                line_no,
                format!("sequence {} where {expected_seq} was expected", record.seq),
            ));
        }
        let body = RecordBody {
            seq: record.seq,
            entry: &record.entry,
            outcome: record.outcome.as_ref(),
            state_hash: &record.state_hash,
        };
        let expected = chain_hash(&chain, &body);
        if record.chain != expected {
            return Err(corrupt(line_no, "hash chain broken".into()));
        }
        chain = expected;
        records.push(record);
        pos += len + 1;
    }
    Ok(LogContents {
        spec,
        genesis,
        records,
        valid_len: pos.min(bytes.len()) as u64,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Number of log records already reflected in `state`.
    pub seq: u64,
    pub chain: String,
    pub state: RoomState,
}

/// Writes via a temporary file and rename, so a crash never leaves a torn
/// snapshot behind.
pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<(), PersistError> {
    let tmp = path.with_extension("snap.tmp");
    let mut text = format!("{SNAPSHOT_MAGIC} {FORMAT_VERSION}\n");
    text.push_str(&serde_json::to_string(snapshot).expect("snapshot serializes"));
    text.push('\n');
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_snapshot(path: &Path) -> Result<Option<Snapshot>, PersistError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    let bad = || PersistError::BadHeader {
        path: path.to_owned(),
        what: "room snapshot",
    };
    let (header, body) = text.split_once('\n').ok_or_else(bad)?;
    if header != format!("{SNAPSHOT_MAGIC} {FORMAT_VERSION}") {
        return Err(bad());
    }
    serde_json::from_str(body.trim_end())
        .map(Some)
        .map_err(|_| bad())
}

/// The result of [`restore_room`].
#[derive(Debug)]
pub struct Restored {
    pub room: Room,
    pub log: LogContents,
    /// Record count covered by the snapshot used, if any.
    pub snapshot_seq: Option<u64>,
    pub replayed: usize,
}

/// Rebuilds a room from its log, starting at the snapshot when one is given
/// and present. Every replayed record must reproduce its outcome and its
/// post-state hash.
pub fn restore_room(
    log_path: &Path,
    snapshot_path: Option<&Path>,
    external: Option<Arc<dyn SentimentScorer>>,
) -> Result<Restored, PersistError> {
    let log = read_log(log_path)?;
    let corrupt = |line: usize, reason: String| PersistError::CorruptLog {
        path: log_path.to_owned(),
        line,
        reason,
    };
    let snapshot = match snapshot_path {
        Some(p) => read_snapshot(p)?,
        None => None,
    };
    let spec = &log.spec;
    let (mut room, start) = match &snapshot {
        Some(snap) => {
            if snap.seq > log.records.len() as u64 || snap.chain != log.chain_at(snap.seq) {
                return Err(corrupt(
                    snap.seq as usize + 1,
                    "snapshot does not match the log".into(),
                ));
            }
            let room = Room::from_state(
                spec.engine,
                spec.matrix.build().map_err(EngineError::from)?,
                spec.scorer.build(external).map_err(EngineError::from)?,
                snap.state.clone(),
            )?;
            if snap.seq > 0 && room.state_hash() != log.records[snap.seq as usize - 1].state_hash {
                return Err(corrupt(
                    snap.seq as usize + 1,
                    "snapshot state hash differs from the log".into(),
                ));
            }
            (room, snap.seq as usize)
        }
        None => (Room::from_spec(spec, external)?, 0),
    };
    for record in &log.records[start..] {
        let line = record.seq as usize + 1;
        let outcome = room
            .apply(&record.entry)
            .map_err(|e| corrupt(line, format!("replay failed: {e}")))?;
        if outcome != record.outcome {
            return Err(corrupt(line, "replayed outcome differs".into()));
        }
        if room.state_hash() != record.state_hash {
            return Err(corrupt(line, "replayed state hash differs".into()));
        }
    }
    let replayed = log.records.len() - start;
    Ok(Restored {
        room,
        log,
        snapshot_seq: snapshot.map(|s| s.seq),
        replayed,
    })
}

/// A room whose every state change is appended to `<dir>/<room_id>.log`,
/// with a snapshot in `<dir>/<room_id>.snap` every `snapshot_every` records.
#[derive(Debug)]
pub struct PersistentRoom {
    room: Room,
    spec: RoomSpec,
    log: RoomLog,
    snapshot_path: PathBuf,
    snapshot_every: u64,
}

impl PersistentRoom {
    pub const DEFAULT_SNAPSHOT_EVERY: u64 = 256;

    pub fn create(
        dir: &Path,
        spec: &RoomSpec,
        external: Option<Arc<dyn SentimentScorer>>,
    ) -> Result<Self, PersistError> {
        let room = Room::from_spec(spec, external)?;
        let log = RoomLog::create(&log_path(dir, &spec.room_id)?, spec)?;
        Ok(Self {
            room,
            spec: spec.clone(),
            log,
            snapshot_path: snapshot_path(dir, &spec.room_id)?,
            snapshot_every: Self::DEFAULT_SNAPSHOT_EVERY,
        })
    }

    pub fn open(
        dir: &Path,
        room_id: &str,
        external: Option<Arc<dyn SentimentScorer>>,
    ) -> Result<Self, PersistError> {
        let path = log_path(dir, room_id)?;
        let snap = snapshot_path(dir, room_id)?;
        let restored = restore_room(&path, Some(&snap), external)?;
        if restored.log.truncated {
            log::warn!("{}: dropped an incomplete final record", path.display());
        }
        let log = RoomLog::resume(&path, &restored.log)?;
        Ok(Self {
            room: restored.room,
            spec: restored.log.spec,
            log,
            snapshot_path: snap,
            snapshot_every: Self::DEFAULT_SNAPSHOT_EVERY,
        })
    }

    /// Opens the room's log if one exists in `dir`, else starts one from `spec`.
    pub fn open_or_create(
        dir: &Path,
        spec: &RoomSpec,
        external: Option<Arc<dyn SentimentScorer>>,
    ) -> Result<Self, PersistError> {
        if log_path(dir, &spec.room_id)?.exists() {
            Self::open(dir, &spec.room_id, external)
        } else {
            Self::create(dir, spec, external)
        }
    }

    pub fn with_snapshot_every(mut self, records: u64) -> Self {
        self.snapshot_every = records.max(1);
        self
    }

    pub fn room(&self) -> &Room {
        &self.room
    }

    pub fn spec(&self) -> &RoomSpec {
        &self.spec
    }

    pub fn records(&self) -> u64 {
        self.log.seq()
    }

    /// Applies `entry` and logs it if it changed the room. Rejected actions
    /// change nothing and are not logged.
    pub fn apply(&mut self, entry: &RoomEntry) -> Result<Option<ActionOutcome>, PersistError> {
        let outcome = self.room.apply(entry)?;
        if outcome.as_ref().is_some_and(|o| !o.accepted) {
            return Ok(outcome);
        }
        self.log
            .append(entry, outcome.as_ref(), &self.room.state_hash())?;
        if self.log.seq().is_multiple_of(self.snapshot_every) {
            self.snapshot()?;
        }
        Ok(outcome)
    }

    pub fn snapshot(&self) -> Result<(), PersistError> {
        write_snapshot(
            &self.snapshot_path,
            &Snapshot {
                seq: self.log.seq(),
                chain: self.log.chain().to_owned(),
                state: self.room.state().clone(),
            },
        )
    }
}

/// Creates a persistent room in `dir` and runs `entries` through it.
pub fn persist_room<'a>(
    dir: &Path,
    spec: &RoomSpec,
    entries: impl IntoIterator<Item = &'a RoomEntry>,
    external: Option<Arc<dyn SentimentScorer>>,
) -> Result<PersistentRoom, PersistError> {
    let mut room = PersistentRoom::create(dir, spec, external)?;
    for e in entries {
        room.apply(e)?;
    }
    Ok(room)
}
