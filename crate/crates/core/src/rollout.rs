//! Canonical trial data model and rollout-log ingestion.
//!
//! A rollout log is line-delimited JSON, one [`RolloutRecord`] per line.
//! Fields unknown to this version are carried through untouched so that logs
//! written by newer tooling survive a read/modify/write cycle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scoring::RubricSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("cannot read rollout log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate rollout_id {0:?}")]
    DuplicateRolloutId(String),
    #[error("no valid records in rollout log ({rejected} rejected lines)")]
    AllLinesRejected { rejected: usize },
    #[error("invalid plan cell {0}: expected count must be nonnegative")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRef {
    pub policy_id: String,
    pub display_name: String,
    pub blinding_code: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonClass {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRef {
    pub task_id: String,
    pub scenario: String,
    pub horizon_class: HorizonClass,
    pub seen_in_pretraining: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Nominal,
    DistributionShift,
    StationShift,
    ObjectShift,
}

impl ConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Nominal => "nominal",
            ConditionKind::DistributionShift => "distribution_shift",
            ConditionKind::StationShift => "station_shift",
            ConditionKind::ObjectShift => "object_shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionTag {
    pub kind: ConditionKind,
    #[serde(default)]
    pub detail: String,
}

impl ConditionTag {
    pub fn nominal() -> Self {
        ConditionTag {
            kind: ConditionKind::Nominal,
            detail: String::new(),
        }
    }

    /// Directory-safe label: `kind` or `kind-detail`.
    pub fn label(&self) -> String {
        if self.detail.is_empty() {
            self.kind.as_str().to_string()
        } else {
            format!("{}-{}", self.kind.as_str(), self.detail)
        }
    }
}

impl fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Success,
    Timeout,
    Dangerous,
    Stuck,
    OperatorStop,
}

/// One `(time_s, value)` sample series for a named predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateTrace {
    pub predicate_id: String,
    pub series: Vec<(f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub rollout_id: String,
    pub task: String,
    /// Blinding code of the policy, never the policy id.
    pub policy: String,
    pub condition: ConditionTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_id: Option<String>,
    pub station: String,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub success: bool,
    #[serde(default)]
    pub rubric_answers: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate_traces: Option<Vec<PredicateTrace>>,
    pub terminal_reason: TerminalReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator_id: Option<String>,
    /// Fields this schema version does not know about, kept verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl RolloutRecord {
    pub fn cell_key(&self) -> CellKey {
        CellKey {
            task: self.task.clone(),
            policy: self.policy.clone(),
            condition: self.condition.clone(),
        }
    }

    fn check_shape(&self, rubrics: &BTreeMap<String, RubricSpec>) -> Result<(), String> {
        if self.rollout_id.is_empty() {
            return Err("empty rollout_id".into());
        }
        if self.ended_at < self.started_at {
            return Err("ended_at precedes started_at".into());
        }
        if !self.rubric_answers.is_empty() {
            if let Some(spec) = rubrics.get(&self.task) {
                if spec.len() != self.rubric_answers.len() {
                    return Err("rubric length mismatch".into());
                }
            }
        }
        Ok(())
    }
}

/// Index key of a (task, policy, condition) cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub task: String,
    pub policy: String,
    pub condition: ConditionTag,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.task, self.policy, self.condition)
    }
}

/// A rejected line from ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

/// Immutable collection of rollouts keyed by `rollout_id`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStore {
    records: BTreeMap<String, RolloutRecord>,
    cells: BTreeMap<CellKey, BTreeSet<String>>,
}

impl RolloutStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = RolloutRecord>) -> Result<Self, RolloutError> {
        let mut store = Self::new();
        for r in records {
            store.insert(r)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, record: RolloutRecord) -> Result<(), RolloutError> {
        if self.records.contains_key(&record.rollout_id) {
            return Err(RolloutError::DuplicateRolloutId(record.rollout_id));
        }
        self.cells
            .entry(record.cell_key())
            .or_default()
            .insert(record.rollout_id.clone());
        self.records.insert(record.rollout_id.clone(), record);
        Ok(())
    }

    /// Replaces an existing record. The cell index is kept in sync.
    pub(crate) fn replace(&mut self, record: RolloutRecord) {
        if let Some(old) = self.records.remove(&record.rollout_id) {
            if let Some(ids) = self.cells.get_mut(&old.cell_key()) {
                ids.remove(&old.rollout_id);
                if ids.is_empty() {
                    self.cells.remove(&old.cell_key());
                }
            }
        }
        self.cells
            .entry(record.cell_key())
            .or_default()
            .insert(record.rollout_id.clone());
        self.records.insert(record.rollout_id.clone(), record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, rollout_id: &str) -> Option<&RolloutRecord> {
        self.records.get(rollout_id)
    }

    /// Records in `rollout_id` order.
    pub fn records(&self) -> impl Iterator<Item = &RolloutRecord> {
        self.records.values()
    }

    pub fn cell(&self, key: &CellKey) -> impl Iterator<Item = &RolloutRecord> {
        self.cells
            .get(key)
            .into_iter()
            .flat_map(|ids| ids.iter().map(|id| &self.records[id]))
    }

    pub fn cell_counts(&self) -> BTreeMap<CellKey, usize> {
        self.cells.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    pub fn tasks(&self) -> BTreeSet<&str> {
        self.records.values().map(|r| r.task.as_str()).collect()
    }

    /// Serializes as JSONL in `rollout_id` order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r).expect("rollout record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Result of ingesting a log: the store plus per-line rejects.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub store: RolloutStore,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogFormat {
    #[default]
    Jsonl,
}

pub fn parse_rollout_log(
    path: &Path,
    format: LogFormat,
    rubrics: &BTreeMap<String, RubricSpec>,
) -> Result<Ingested, RolloutError> {
    let text = std::fs::read_to_string(path).map_err(|source| RolloutError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rollout_text(&text, format, rubrics)
}

/// Parses log text. Malformed lines are collected as rejects; a duplicate
/// `rollout_id` is fatal.
pub fn parse_rollout_text(
    text: &str,
    format: LogFormat,
    rubrics: &BTreeMap<String, RubricSpec>,
) -> Result<Ingested, RolloutError> {
    let LogFormat::Jsonl = format;
    let mut store = RolloutStore::new();
    let mut rejects = Vec::new();
    let mut nonblank = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        nonblank += 1;
        let record: RolloutRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject {
                    line: line_no,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        if let Err(reason) = record.check_shape(rubrics) {
            rejects.push(Reject { line: line_no, reason });
            continue;
        }
        store.insert(record)?;
    }
    if nonblank > 0 && store.is_empty() {
        return Err(RolloutError::AllLinesRejected {
            rejected: rejects.len(),
        });
    }
    Ok(Ingested { store, rejects })
}

/// Expected rollout counts per cell.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub cells: BTreeMap<CellKey, i64>,
}

impl Plan {
    /// Same expected count for every (task, policy, condition) combination.
    pub fn uniform<'a>(
        tasks: impl IntoIterator<Item = &'a str> + Clone,
        policies: impl IntoIterator<Item = &'a str> + Clone,
        conditions: &[ConditionTag],
        expected: i64,
    ) -> Self {
        let mut cells = BTreeMap::new();
        for t in tasks {
            for p in policies.clone() {
                for c in conditions {
                    cells.insert(
                        CellKey {
                            task: t.to_string(),
                            policy: p.to_string(),
                            condition: c.clone(),
                        },
                        expected,
                    );
                }
            }
        }
        Plan { cells }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Missing,
    Overrun,
    Unplanned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellReport {
    pub cell: CellKey,
    pub expected: usize,
    pub observed: usize,
    pub missing: usize,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub cells: Vec<CellReport>,
    pub total_records: usize,
    /// Slots marked missing by the session protocol, as `bundle_id/slot`.
    pub missing_slots: Vec<String>,
}

impl ValidationReport {
    pub fn missing(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.missing > 0)
    }

    pub fn overruns(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.status == CellStatus::Overrun)
    }
}

pub fn validate_store(store: &RolloutStore, plan: &Plan) -> Result<ValidationReport, RolloutError> {
    if let Some((k, _)) = plan.cells.iter().find(|(_, &v)| v < 0) {
        return Err(RolloutError::InvalidPlan(k.to_string()));
    }
    let observed = store.cell_counts();
    let mut cells = Vec::new();
    for (key, &expected) in &plan.cells {
        let expected = expected as usize;
        let obs = observed.get(key).copied().unwrap_or(0);
        let status = match obs.cmp(&expected) {
            std::cmp::Ordering::Less => CellStatus::Missing,
            std::cmp::Ordering::Equal => CellStatus::Complete,
            std::cmp::Ordering::Greater => CellStatus::Overrun,
        };
        cells.push(CellReport {
            cell: key.clone(),
            expected,
            observed: obs,
            missing: expected.saturating_sub(obs),
            status,
        });
    }
    for (key, &obs) in &observed {
        if !plan.cells.contains_key(key) {
            cells.push(CellReport {
                cell: key.clone(),
                expected: 0,
                observed: obs,
                missing: 0,
                status: CellStatus::Unplanned,
            });
        }
    }
    Ok(ValidationReport {
        cells,
        total_records: store.len(),
        missing_slots: Vec::new(),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use chrono::TimeZone;

    pub fn record(id: &str, task: &str, policy: &str, success: bool) -> RolloutRecord {
        RolloutRecord {
            schema_version: SCHEMA_VERSION,
            rollout_id: id.to_string(),
            task: task.to_string(),
            policy: policy.to_string(),
            condition: ConditionTag::nominal(),
            bundle_id: None,
            station: "st-1".into(),
            started_at: Utc.with_ymd_and_hms(2025, 3, 1, 10, 0, 0).unwrap(),
            ended_at: Utc.with_ymd_and_hms(2025, 3, 1, 10, 2, 0).unwrap(),
            success,
            rubric_answers: Vec::new(),
            predicate_traces: None,
            terminal_reason: if success {
                TerminalReason::Success
            } else {
                TerminalReason::Timeout
            },
            evaluator_id: None,
            extra: BTreeMap::new(),
        }
    }
}
