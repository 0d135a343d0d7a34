//! Blind, randomized bundle sessions and their event-sourced persistence.

mod events;
mod qa;
mod session;

pub use events::{Campaign, CampaignState, Event, EventLog, LoggedEvent};
pub use qa::{qa_sample_size, sample_qa_queue, QaQueueItem};
pub use session::{
    create_session, unblind, validate_against_session, Assignment, Authorization, Bundle, IcSource, InitialCondition,
    Role, Session, SessionPlan, Slot, SlotStatus, SlotUpdate,
};

use crate::rollout::RolloutError;
use crate::scoring::ScoringError;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("need at least 2 policies, got {0}")]
    TooFewPolicies(usize),
    #[error("n_bundles must be at least 1")]
    NoBundles,
    #[error("session has no tasks")]
    NoTasks,
    #[error("duplicate policy id {0:?}")]
    DuplicatePolicy(String),
    #[error("{0:?} is both an evaluator and a QA reviewer")]
    EvaluatorIsReviewer(String),
    #[error("expected {expected} initial conditions, got {got}")]
    InitialConditionCount { expected: usize, got: usize },
    #[error("initial condition {0:?}: seed must be present iff source is simulation_sampled")]
    InvalidInitialCondition(String),
    #[error("session exhausted")]
    SessionExhausted,
    #[error("bundle {0} has running slots and no pending slot")]
    BundleInProgress(String),
    #[error("bundle {bundle_id} is not the current bundle {current}")]
    OutOfOrder { bundle_id: String, current: String },
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("duplicate session {0:?}")]
    DuplicateSession(String),
    #[error("unknown bundle {0:?}")]
    UnknownBundle(String),
    #[error("bundle {bundle_id} has no slot {slot}")]
    UnknownSlot { bundle_id: String, slot: usize },
    #[error("illegal transition from {from:?} via {to:?}")]
    IllegalTransition { from: SlotStatus, to: SlotUpdate },
    #[error("unknown rollout {0:?}")]
    UnknownRollout(String),
    #[error("reviewer of rollout {0:?} is its original evaluator")]
    SelfReview(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("session {0:?} is incomplete; unblinding requires override")]
    SessionIncomplete(String),
    #[error("QA fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("store is empty")]
    EmptyStore,
    #[error("event log entry {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

impl PartialEq for ProtocolError {
    fn eq(&self, other: &Self) -> bool {
        // io and wrapped errors compare by message
        self.to_string() == other.to_string() && std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}
