//! Wire types. Nothing here may carry a policy id or display name: these
//! bodies reach evaluators and reviewers.

use chrono::{DateTime, Utc};
use evalkit::protocol::{Assignment, InitialCondition, Session, SlotStatus};
use evalkit::rollout::{ConditionTag, TerminalReason};
use evalkit::scoring::QaReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConditionView {
    pub ic_id: String,
    pub task_id: String,
    pub overlay_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentView {
    pub session_id: String,
    pub bundle_id: String,
    pub bundle_index: usize,
    pub slot: usize,
    pub slot_count: usize,
    /// Human-readable position, e.g. "bundle 12, slot 2 of 3".
    pub position: String,
    pub blinding_code: String,
    pub initial_condition: InitialConditionView,
    /// Rubric questions in answer order; empty when the task has no rubric.
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSessionView {
    pub session_id: String,
    pub tasks: Vec<String>,
    pub condition: ConditionTag,
    pub bundles: usize,
    pub progress: Progress,
    pub complete: bool,
    /// Blinded next slot; absent when the session is complete or the
    /// current bundle has a slot running.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current: Option<AssignmentView>,
    pub missing_slots: Vec<String>,
}

pub(crate) fn overlay_url(base: &str, ic: &InitialCondition) -> String {
    format!("{}/{}", base.trim_end_matches('/'), ic.overlay_asset.trim_start_matches('/'))
}

pub(crate) fn assignment_view(a: &Assignment, overlay_base: &str, questions: Vec<String>) -> AssignmentView {
    AssignmentView {
        session_id: a.session_id.clone(),
        bundle_id: a.bundle_id.clone(),
        bundle_index: a.bundle_index,
        slot: a.slot,
        slot_count: a.slot_count,
        position: format!("bundle {}, slot {} of {}", a.bundle_index + 1, a.slot + 1, a.slot_count),
        blinding_code: a.blinding_code.clone(),
        initial_condition: InitialConditionView {
            ic_id: a.ic.ic_id.clone(),
            task_id: a.ic.task_id.clone(),
            overlay_url: overlay_url(overlay_base, &a.ic),
        },
        questions,
    }
}

pub(crate) fn session_view(s: &Session, current: Option<AssignmentView>) -> ApiSessionView {
    let (done, total) = s.progress();
    ApiSessionView {
        session_id: s.session_id.clone(),
        tasks: s.tasks.clone(),
        condition: s.condition.clone(),
        bundles: s.bundles.len(),
        progress: Progress { done, total },
        complete: s.is_complete(),
        current,
        missing_slots: s.missing_slots(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub policy_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub policies: Vec<PolicyInput>,
    pub tasks: Vec<String>,
    #[serde(default)]
    pub condition: Option<ConditionTag>,
    pub n_bundles: usize,
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub initial_conditions: Option<Vec<InitialCondition>>,
    #[serde(default)]
    pub evaluator_ids: Vec<String>,
    #[serde(default)]
    pub qa_reviewer_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub session: ApiSessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSubmission {
    pub session_id: String,
    pub bundle_id: String,
    pub slot: usize,
    pub success: bool,
    pub terminal_reason: TerminalReason,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub station: String,
    #[serde(default)]
    pub rubric_answers: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutAccepted {
    pub rollout_id: String,
    pub slot_status: SlotStatus,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortRequest {
    pub bundle_id: String,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub bundle_id: String,
    pub slot: usize,
    pub status: SlotStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricSubmission {
    pub answers: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricAccepted {
    pub rollout_id: String,
    pub milestones_achieved: usize,
    pub milestones: usize,
    pub task_completion: f64,
    /// Set when the recorded success disagrees with "all milestones met".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_lint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItemView {
    pub rollout_id: String,
    pub task: String,
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaQueueView {
    pub fraction: f64,
    pub seed: u64,
    pub sampled: usize,
    /// Sampled rollouts this reviewer evaluated, left out of `items`.
    pub excluded_own: usize,
    pub items: Vec<QaItemView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSubmission {
    pub answers: Vec<bool>,
    pub success: bool,
}

/// Returned only after the reviewer has committed their answers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QaResult {
    pub rollout_id: String,
    pub original_answers: Vec<bool>,
    pub original_success: bool,
    pub mismatched_questions: Vec<usize>,
    pub success_mismatch: bool,
    pub totals: QaReport,
}
