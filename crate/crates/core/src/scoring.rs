//! Rubric and predicate scoring, QA discrepancy, and corrections.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rollout::{PredicateTrace, RolloutRecord, RolloutStore, TerminalReason};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("rubric length mismatch: expected {expected} answers, got {got}")]
    RubricLengthMismatch { expected: usize, got: usize },
    #[error("rubric for {0} has no milestones")]
    NoMilestones(String),
    #[error("duplicate question {0:?} in rubric")]
    DuplicateQuestion(String),
    #[error("success conjunction references unknown predicate {0:?}")]
    UnknownConjunct(String),
    #[error("missing trace for predicate {0:?}")]
    MissingTrace(String),
    #[error("time stamps of predicate {0:?} are not increasing")]
    NonMonotoneTrace(String),
    #[error("negative time stamp in predicate {0:?}")]
    NegativeTime(String),
    #[error("review references unknown rollout {0:?}")]
    DanglingRollout(String),
    #[error("reviewer {reviewer:?} is the original evaluator of {rollout_id:?}")]
    SelfReview { rollout_id: String, reviewer: String },
    #[error("rubric answer index {index} out of range for {rollout_id:?}")]
    AnswerIndex { rollout_id: String, index: usize },
}

/// Ordered milestone questionnaire for one task.
///
/// Answer vectors are laid out as all milestones followed by all failure
/// questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricSpec {
    pub task_id: String,
    pub milestones: Vec<String>,
    #[serde(default)]
    pub failure_questions: Vec<String>,
}

impl RubricSpec {
    pub fn new(task_id: &str, milestones: Vec<String>, failure_questions: Vec<String>) -> Result<Self, ScoringError> {
        let spec = RubricSpec {
            task_id: task_id.to_string(),
            milestones,
            failure_questions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.milestones.is_empty() {
            return Err(ScoringError::NoMilestones(self.task_id.clone()));
        }
        let mut seen = BTreeSet::new();
        for q in self.milestones.iter().chain(&self.failure_questions) {
            if !seen.insert(q) {
                return Err(ScoringError::DuplicateQuestion(q.clone()));
            }
        }
        Ok(())
    }

    pub fn milestone_count(&self) -> usize {
        self.milestones.len()
    }

    /// Total number of answers a rollout carries for this rubric.
    pub fn len(&self) -> usize {
        self.milestones.len() + self.failure_questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn questions(&self) -> impl Iterator<Item = &String> {
        self.milestones.iter().chain(&self.failure_questions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessMode {
    /// Each conjunct must have been true at some instant in the window.
    #[default]
    Latched,
    /// Every conjunct must be true at its last sample inside the window.
    FinalInstant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateSpec {
    pub task_id: String,
    pub predicates: Vec<String>,
    pub success_conjunction: Vec<String>,
    #[serde(default)]
    pub success_mode: SuccessMode,
}

impl PredicateSpec {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.predicates.is_empty() {
            return Err(ScoringError::NoMilestones(self.task_id.clone()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.predicates {
            if !seen.insert(p) {
                return Err(ScoringError::DuplicateQuestion(p.clone()));
            }
        }
        for c in &self.success_conjunction {
            if !seen.contains(c) {
                return Err(ScoringError::UnknownConjunct(c.clone()));
            }
        }
        Ok(())
    }
}

/// Fraction of milestones achieved, kept as an exact count over `m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskCompletion {
    pub achieved: Vec<bool>,
}

impl TaskCompletion {
    pub fn from_counts(achieved: usize, milestones: usize) -> Self {
        assert!(achieved <= milestones && milestones > 0);
        let mut bits = vec![false; milestones];
        bits[..achieved].iter_mut().for_each(|b| *b = true);
        TaskCompletion { achieved: bits }
    }

    pub fn numerator(&self) -> usize {
        self.achieved.iter().filter(|&&b| b).count()
    }

    pub fn denominator(&self) -> usize {
        self.achieved.len()
    }

    pub fn value(&self) -> f64 {
        self.numerator() as f64 / self.denominator() as f64
    }
}

pub fn score_rubric(answers: &[bool], spec: &RubricSpec) -> Result<TaskCompletion, ScoringError> {
    if answers.len() != spec.len() {
        return Err(ScoringError::RubricLengthMismatch {
            expected: spec.len(),
            got: answers.len(),
        });
    }
    Ok(TaskCompletion {
        achieved: answers[..spec.milestone_count()].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateScore {
    pub success: bool,
    pub tc: TaskCompletion,
}

pub fn score_predicates(
    traces: &[PredicateTrace],
    spec: &PredicateSpec,
    timeout_s: f64,
) -> Result<PredicateScore, ScoringError> {
    spec.validate()?;
    let by_id: BTreeMap<&str, &PredicateTrace> = traces.iter().map(|t| (t.predicate_id.as_str(), t)).collect();
    let mut ever = BTreeMap::new();
    let mut last = BTreeMap::new();
    for pid in &spec.predicates {
        let trace = by_id
            .get(pid.as_str())
            .ok_or_else(|| ScoringError::MissingTrace(pid.clone()))?;
        let mut prev = f64::NEG_INFINITY;
        let mut any = false;
        let mut final_value = false;
        for &(t, v) in &trace.series {
            if t < 0.0 {
                return Err(ScoringError::NegativeTime(pid.clone()));
            }
            if t <= prev {
                return Err(ScoringError::NonMonotoneTrace(pid.clone()));
            }
            prev = t;
            if t > timeout_s {
                continue;
            }
            any |= v;
            final_value = v;
        }
        ever.insert(pid.as_str(), any);
        last.insert(pid.as_str(), final_value);
    }
    let achieved = spec.predicates.iter().map(|p| ever[p.as_str()]).collect();
    let state = match spec.success_mode {
        SuccessMode::Latched => &ever,
        SuccessMode::FinalInstant => &last,
    };
    let success = !spec.success_conjunction.is_empty() && spec.success_conjunction.iter().all(|c| state[c.as_str()]);
    Ok(PredicateScore {
        success,
        tc: TaskCompletion { achieved },
    })
}

/// Flags a recorded success flag that disagrees with the milestone answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuccessLint {
    pub rollout_id: String,
    pub recorded_success: bool,
    pub all_milestones: bool,
}

pub fn lint_success_consistency(record: &RolloutRecord, spec: &RubricSpec) -> Option<SuccessLint> {
    if record.rubric_answers.len() != spec.len() {
        return None;
    }
    let all = record.rubric_answers[..spec.milestone_count()].iter().all(|&b| b);
    (all != record.success).then(|| SuccessLint {
        rollout_id: record.rollout_id.clone(),
        recorded_success: record.success,
        all_milestones: all,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaReview {
    pub rollout_id: String,
    pub reviewer_id: String,
    pub reviewed_answers: Vec<bool>,
    pub reviewed_success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QaReport {
    pub reviewed: usize,
    pub success_mismatches: usize,
    pub question_pairs: usize,
    pub question_mismatches: usize,
    pub success_discrepancy: f64,
    pub question_discrepancy: f64,
}

pub fn qa_discrepancy(originals: &RolloutStore, reviews: &[QaReview]) -> Result<QaReport, ScoringError> {
    let mut success_mismatches = 0;
    let mut question_pairs = 0;
    let mut question_mismatches = 0;
    for review in reviews {
        let orig = originals
            .get(&review.rollout_id)
            .ok_or_else(|| ScoringError::DanglingRollout(review.rollout_id.clone()))?;
        if orig.evaluator_id.as_deref() == Some(review.reviewer_id.as_str()) {
            return Err(ScoringError::SelfReview {
                rollout_id: review.rollout_id.clone(),
                reviewer: review.reviewer_id.clone(),
            });
        }
        if orig.rubric_answers.len() != review.reviewed_answers.len() {
            return Err(ScoringError::RubricLengthMismatch {
                expected: orig.rubric_answers.len(),
                got: review.reviewed_answers.len(),
            });
        }
        success_mismatches += usize::from(orig.success != review.reviewed_success);
        question_pairs += orig.rubric_answers.len();
        question_mismatches += orig
            .rubric_answers
            .iter()
            .zip(&review.reviewed_answers)
            .filter(|(a, b)| a != b)
            .count();
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(QaReport {
        reviewed: reviews.len(),
        success_mismatches,
        question_pairs,
        question_mismatches,
        success_discrepancy: ratio(success_mismatches, reviews.len()),
        question_discrepancy: ratio(question_mismatches, question_pairs),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case")]
pub enum CorrectionField {
    Success { value: bool },
    RubricAnswer { index: usize, value: bool },
    TerminalReason { value: TerminalReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub rollout_id: String,
    #[serde(flatten)]
    pub change: CorrectionField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub rollout_id: String,
    pub field: String,
    pub old: Value,
    pub new: Value,
}

/// Applies corrections to a copy of `store`; the input is left untouched.
pub fn apply_corrections(
    store: &RolloutStore,
    corrections: &[Correction],
) -> Result<(RolloutStore, Vec<AuditEntry>), ScoringError> {
    let mut out = store.clone();
    let mut audit = Vec::with_capacity(corrections.len());
    for c in corrections {
        let mut rec = out
            .get(&c.rollout_id)
            .cloned()
            .ok_or_else(|| ScoringError::DanglingRollout(c.rollout_id.clone()))?;
        let (field, old, new) = match &c.change {
            CorrectionField::Success { value } => {
                let old = rec.success;
                rec.success = *value;
                ("success".to_string(), Value::Bool(old), Value::Bool(*value))
            }
            CorrectionField::RubricAnswer { index, value } => {
                let slot = rec.rubric_answers.get_mut(*index).ok_or_else(|| ScoringError::AnswerIndex {
                    rollout_id: c.rollout_id.clone(),
                    index: *index,
                })?;
                let old = *slot;
                *slot = *value;
                (format!("rubric_answers[{index}]"), Value::Bool(old), Value::Bool(*value))
            }
            CorrectionField::TerminalReason { value } => {
                let old = rec.terminal_reason;
                rec.terminal_reason = *value;
                (
                    "terminal_reason".to_string(),
                    serde_json::to_value(old).expect("enum serializes"),
                    serde_json::to_value(value).expect("enum serializes"),
                )
            }
        };
        audit.push(AuditEntry {
            rollout_id: c.rollout_id.clone(),
            field,
            old,
            new,
        });
        out.replace(rec);
    }
    Ok((out, audit))
}
