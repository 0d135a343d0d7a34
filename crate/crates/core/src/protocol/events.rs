//! Append-only JSONL event log. Campaign state is a pure fold of events.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::session::{create_session, unblind, Assignment, Authorization, Session, SessionPlan, SlotStatus, SlotUpdate};
use super::ProtocolError;
use crate::rollout::{RolloutRecord, RolloutStore};
use crate::scoring::{Correction, QaReview};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session: Session,
    },
    SlotUpdated {
        session_id: String,
        bundle_id: String,
        slot: usize,
        update: SlotUpdate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rollout_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        evaluator_id: Option<String>,
    },
    RolloutRecorded {
        record: RolloutRecord,
    },
    RubricSubmitted {
        rollout_id: String,
        answers: Vec<bool>,
        submitted_by: String,
    },
    QaReviewed {
        review: QaReview,
    },
    Corrected {
        correction: Correction,
        actor_id: String,
    },
    Unblinded {
        session_id: String,
        actor_id: String,
        forced: bool,
    },
}

/// One line of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    pub event_type: String,
    pub timestamp: DateTime<Utc>,
    pub payload: Value,
}

impl LoggedEvent {
    pub fn new(seq: u64, timestamp: DateTime<Utc>, event: &Event) -> Self {
        let Value::Object(mut obj) = serde_json::to_value(event).expect("events serialize") else {
            unreachable!("adjacently tagged enum serializes to an object")
        };
        let event_type = obj
            .remove("event_type")
            .and_then(|v| v.as_str().map(str::to_string))
            .expect("tag present");
        LoggedEvent {
            seq,
            event_type,
            timestamp,
            payload: obj.remove("payload").unwrap_or(Value::Null),
        }
    }

    pub fn event(&self) -> Result<Event, ProtocolError> {
        let v = serde_json::json!({ "event_type": self.event_type, "payload": self.payload });
        serde_json::from_value(v).map_err(|e| ProtocolError::CorruptLog {
            seq: self.seq,
            reason: e.to_string(),
        })
    }
}

/// Everything reconstructible from the log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CampaignState {
    pub sessions: BTreeMap<String, Session>,
    pub rollouts: RolloutStore,
    /// Every rubric submission per rollout, oldest first.
    pub rubric_history: BTreeMap<String, Vec<Vec<bool>>>,
    pub reviews: Vec<QaReview>,
    pub unblind_events: Vec<(String, String)>,
}

impl CampaignState {
    /// Validates an event against the current state and applies it.
    pub fn apply(&mut self, event: &Event) -> Result<(), ProtocolError> {
        match event {
            Event::SessionCreated { session } => {
                if self.sessions.contains_key(&session.session_id) {
                    return Err(ProtocolError::DuplicateSession(session.session_id.clone()));
                }
                self.sessions.insert(session.session_id.clone(), session.clone());
            }
            Event::SlotUpdated {
                session_id,
                bundle_id,
                slot,
                update,
                rollout_id,
                evaluator_id,
            } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| ProtocolError::UnknownSession(session_id.clone()))?;
                s.record_slot(bundle_id, *slot, rollout_id.as_deref(), *update, evaluator_id.as_deref())?;
            }
            Event::RolloutRecorded { record } => {
                self.rollouts.insert(record.clone())?;
            }
            Event::RubricSubmitted { rollout_id, answers, .. } => {
                let mut rec = self
                    .rollouts
                    .get(rollout_id)
                    .cloned()
                    .ok_or_else(|| ProtocolError::UnknownRollout(rollout_id.clone()))?;
                rec.rubric_answers = answers.clone();
                self.rollouts.replace(rec);
                self.rubric_history.entry(rollout_id.clone()).or_default().push(answers.clone());
            }
            Event::QaReviewed { review } => {
                let rec = self
                    .rollouts
                    .get(&review.rollout_id)
                    .ok_or_else(|| ProtocolError::UnknownRollout(review.rollout_id.clone()))?;
                if rec.evaluator_id.as_deref() == Some(review.reviewer_id.as_str()) {
                    return Err(ProtocolError::SelfReview(review.rollout_id.clone()));
                }
                self.reviews.push(review.clone());
            }
            Event::Corrected { correction, .. } => {
                let (store, _) = crate::scoring::apply_corrections(&self.rollouts, std::slice::from_ref(correction))?;
                self.rollouts = store;
            }
            Event::Unblinded { session_id, actor_id, .. } => {
                if !self.sessions.contains_key(session_id) {
                    return Err(ProtocolError::UnknownSession(session_id.clone()));
                }
                self.unblind_events.push((session_id.clone(), actor_id.clone()));
            }
        }
        Ok(())
    }

    pub fn fold<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self, ProtocolError> {
        let mut state = CampaignState::default();
        for e in events {
            state.apply(e)?;
        }
        Ok(state)
    }
}

/// JSONL log, optionally backed by a file. Every append is flushed before
/// the state is updated.
#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: Vec<LoggedEvent>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            path: None,
            file: None,
            entries: Vec::new(),
        }
    }

    /// Opens or creates a log file, reading any existing entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| ProtocolError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut entries = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LoggedEvent = serde_json::from_str(&line).map_err(|e| ProtocolError::CorruptLog {
                    seq: i as u64,
                    reason: e.to_string(),
                })?;
                entries.push(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(EventLog {
            path: Some(path),
            file: Some(file),
            entries,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn entries(&self) -> &[LoggedEvent] {
        &self.entries
    }

    pub fn append(&mut self, event: &Event, timestamp: DateTime<Utc>) -> Result<&LoggedEvent, ProtocolError> {
        let entry = LoggedEvent::new(self.entries.len() as u64, timestamp, event);
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            let path = self.path.as_ref().expect("file implies path");
            let io = |source| ProtocolError::Io {
                path: path.display().to_string(),
                source,
            };
            f.write_all(line.as_bytes()).map_err(io)?;
            f.flush().map_err(io)?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn replay(&self) -> Result<CampaignState, ProtocolError> {
        let events = self.entries.iter().map(LoggedEvent::event).collect::<Result<Vec<_>, _>>()?;
        CampaignState::fold(&events)
    }
}

/// Log plus folded state. Each operation validates against the state,
/// appends the event, then applies it.
#[derive(Debug)]
pub struct Campaign {
    log: EventLog,
    state: CampaignState,
    clock: fn() -> DateTime<Utc>,
}

impl Campaign {
    pub fn new(log: EventLog) -> Result<Self, ProtocolError> {
        let state = log.replay()?;
        Ok(Campaign {
            log,
            state,
            clock: Utc::now,
        })
    }

    pub fn with_clock(mut self, clock: fn() -> DateTime<Utc>) -> Self {
        self.clock = clock;
        self
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    fn commit(&mut self, event: Event) -> Result<(), ProtocolError> {
        let mut next = self.state.clone();
        next.apply(&event)?;
        self.log.append(&event, (self.clock)())?;
        self.state = next;
        Ok(())
    }

    pub fn session(&self, session_id: &str) -> Result<&Session, ProtocolError> {
        self.state
            .sessions
            .get(session_id)
            .ok_or_else(|| ProtocolError::UnknownSession(session_id.to_string()))
    }

    pub fn create_session(&mut self, plan: &SessionPlan) -> Result<&Session, ProtocolError> {
        let session = create_session(plan)?;
        let id = session.session_id.clone();
        self.commit(Event::SessionCreated { session })?;
        self.session(&id)
    }

    pub fn next_assignment(&self, session_id: &str) -> Result<Assignment, ProtocolError> {
        self.session(session_id)?.next_assignment()
    }

    pub fn record_slot(
        &mut self,
        session_id: &str,
        bundle_id: &str,
        slot: usize,
        rollout_id: Option<&str>,
        update: SlotUpdate,
        evaluator_id: Option<&str>,
    ) -> Result<SlotStatus, ProtocolError> {
        self.commit(Event::SlotUpdated {
            session_id: session_id.to_string(),
            bundle_id: bundle_id.to_string(),
            slot,
            update,
            rollout_id: rollout_id.map(str::to_string),
            evaluator_id: evaluator_id.map(str::to_string),
        })?;
        let s = self.session(session_id)?;
        Ok(s.bundle(bundle_id).expect("applied").slots[slot].status)
    }

    pub fn record_rollout(&mut self, record: RolloutRecord) -> Result<(), ProtocolError> {
        self.commit(Event::RolloutRecorded { record })
    }

    pub fn submit_rubric(&mut self, rollout_id: &str, answers: Vec<bool>, submitted_by: &str) -> Result<(), ProtocolError> {
        self.commit(Event::RubricSubmitted {
            rollout_id: rollout_id.to_string(),
            answers,
            submitted_by: submitted_by.to_string(),
        })
    }

    pub fn submit_review(&mut self, review: QaReview) -> Result<(), ProtocolError> {
        self.commit(Event::QaReviewed { review })
    }

    pub fn correct(&mut self, correction: Correction, actor_id: &str) -> Result<(), ProtocolError> {
        self.commit(Event::Corrected {
            correction,
            actor_id: actor_id.to_string(),
        })
    }

    pub fn unblind(&mut self, session_id: &str, auth: &Authorization, force: bool) -> Result<BTreeMap<String, String>, ProtocolError> {
        let mapping = unblind(self.session(session_id)?, auth, force)?;
        self.commit(Event::Unblinded {
            session_id: session_id.to_string(),
            actor_id: auth.actor_id.clone(),
            forced: force,
        })?;
        Ok(mapping)
    }
}
