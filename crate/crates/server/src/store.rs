//! Append-only session logs: one file per session under the persistence
//! directory, one JSON event per line. A session is rebuilt by replaying its
//! turn events.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use dst_core::engine::Conversation;
use dst_core::tracker::{ActionKind, DialogueState, StateRecord, TrackerError};
use dst_core::validator::Label;
use dst_core::Speaker;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("session {id}: line {line} of the log is corrupt: {message}")]
    Corrupt { id: String, line: usize, message: String },
    #[error("session {id}: replay failed: {source}")]
    Replay {
        id: String,
        #[source]
        source: TrackerError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub at: DateTime<Utc>,
    pub turn_no: u32,
    pub user: String,
    pub reply: String,
    pub action: ActionKind,
    pub verdict: Label,
    /// Context-run intent scores; the validator's running features are
    /// recomputed from these on replay.
    pub scores: BTreeMap<String, f64>,
    pub schedule_line: (String, Option<String>),
    pub records: Vec<StateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        seed: u64,
        at: DateTime<Utc>,
    },
    Turn(TurnEvent),
    /// A message the engine could not process; the user was asked to
    /// repeat. It changes no state.
    Unprocessed {
        at: DateTime<Utc>,
        user: String,
        reply: String,
        code: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub text: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub seed: u64,
    pub conversation: Conversation,
    pub transcript: Vec<TranscriptEntry>,
    pub created_at: DateTime<Utc>,
    pub last_active: DateTime<Utc>,
    log: File,
}

impl Session {
    pub fn state(&self) -> &DialogueState {
        &self.conversation.state
    }

    /// Writes `event` and syncs it to disk before returning.
    pub fn append(&mut self, event: &Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        match event {
            Event::Turn(t) => self.push_exchange(&t.user, &t.reply, t.at),
            Event::Unprocessed { at, user, reply, .. } => self.push_exchange(user, reply, *at),
            Event::Created { .. } => {}
        }
        Ok(())
    }

    fn push_exchange(&mut self, user: &str, reply: &str, at: DateTime<Utc>) {
        for (speaker, text) in [(Speaker::User, user), (Speaker::System, reply)] {
            self.transcript.push(TranscriptEntry {
                speaker,
                text: text.to_string(),
                at,
            });
        }
        self.last_active = at;
    }
}

/// Only canonical UUIDs name sessions, so ids are always safe file names.
pub fn valid_session_id(id: &str) -> bool {
    uuid::Uuid::parse_str(id).is_ok_and(|u| u.hyphenated().to_string() == id)
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(SessionStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn create(&self, seed: u64) -> Result<Session, StoreError> {
        let id = uuid::Uuid::new_v4().to_string();
        let log = OpenOptions::new().create_new(true).append(true).open(self.path(&id))?;
        let now = Utc::now();
        let mut s = Session {
            conversation: Conversation::new(DialogueState::new(id.clone(), seed)),
            id: id.clone(),
            seed,
            transcript: Vec::new(),
            created_at: now,
            last_active: now,
            log,
        };
        s.append(&Event::Created {
            session_id: id,
            seed,
            at: now,
        })?;
        Ok(s)
    }

    /// Ids of every session on disk, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for e in std::fs::read_dir(&self.dir)? {
            let name = e?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) {
                if valid_session_id(id) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Replays a session from disk; `None` when no such session exists.
    /// A torn final line, left by a crash mid-write, is cut off.
    pub fn load(&self, id: &str) -> Result<Option<Session>, StoreError> {
        if !valid_session_id(id) {
            return Ok(None);
        }
        let path = self.path(id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            log::warn!("session {id}: dropping {} bytes of a torn final line", bytes.len() - complete);
            OpenOptions::new().write(true).open(&path)?.set_len(complete as u64)?;
        }
        let corrupt = |line: usize, message: String| StoreError::Corrupt {
            id: id.to_string(),
            line,
            message,
        };

        let mut events = Vec::new();
        for (i, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            events.push(serde_json::from_slice::<Event>(line).map_err(|e| corrupt(i + 1, e.to_string()))?);
        }
        let Some(Event::Created { session_id, seed, at }) = events.first().cloned() else {
            return Err(corrupt(1, "log does not start with a created event".into()));
        };
        if session_id != id {
            return Err(corrupt(1, format!("log belongs to session {session_id}")));
        }

        let turns: Vec<&TurnEvent> = events
            .iter()
            .filter_map(|e| match e {
                Event::Turn(t) => Some(t),
                _ => None,
            })
            .collect();
        let conversation = Conversation::restore(
            id,
            seed,
            turns.iter().flat_map(|t| &t.records),
            turns.iter().map(|t| t.schedule_line.clone()).collect(),
            turns.iter().map(|t| &t.scores),
        )
        .map_err(|source| StoreError::Replay {
            id: id.to_string(),
            source,
        })?;

        let log = OpenOptions::new().append(true).open(&path)?;
        let mut s = Session {
            id: id.to_string(),
            seed,
            conversation,
            transcript: Vec::new(),
            created_at: at,
            last_active: at,
            log,
        };
        for e in &events {
            match e {
                Event::Turn(t) => s.push_exchange(&t.user, &t.reply, t.at),
                Event::Unprocessed { at, user, reply, .. } => s.push_exchange(user, reply, *at),
                Event::Created { .. } => {}
            }
        }
        Ok(Some(s))
    }
}
