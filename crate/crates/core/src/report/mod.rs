//! Campaign reports: ingestion through comparisons and letter displays,
//! written as deterministic JSON and CSV files.

mod analysis;
mod config;
mod format;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analysis::{
    analyze_aggregate, analyze_cell, AggregateAnalysis, AnalysisSettings, BetaSummary, CellAnalysis, CellPooling,
    ComparisonSection, DirichletSummary, PolicyAggregate, PolicyCompletion, PolicySuccess, Specs, task_completion,
};
pub use config::{CampaignConfig, DangerousPolicy, CONFIG_VERSION};
pub use format::{csv_num, natural_cmp, sig_digits};

use crate::comparison::ComparisonError;
use crate::posterior::PosteriorError;
use crate::rollout::{parse_rollout_log, validate_store, LogFormat, RolloutError, RolloutStore};
use crate::scoring::{PredicateSpec, RubricSpec, ScoringError};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("spec file {path}: {reason}")]
    Spec { path: String, reason: String },
    #[error("rollout-model: {0}")]
    Rollout(#[from] RolloutError),
    #[error("scoring: {0}")]
    Scoring(#[from] ScoringError),
    #[error("posterior: {0}")]
    Posterior(#[from] PosteriorError),
    #[error("comparison: {0}")]
    Comparison(#[from] ComparisonError),
    #[error("report: bundle {bundle_id} holds two rollouts for policy code {policy}")]
    DuplicateBundleSlot { bundle_id: String, policy: String },
    #[error("report: output directory {0} exists and is not a previous report")]
    OutDirOccupied(String),
}

impl ReportError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ReportError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub log: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_version: u32,
    pub evalkit_version: String,
    pub seed: u64,
    pub alpha: f64,
    pub config_sha256: String,
    pub inputs: Vec<InputDigest>,
    pub rejected_lines: Vec<RejectedLine>,
    /// Records whose task, condition or blinding code is not in the config.
    pub unreported_records: usize,
    pub outputs: Vec<InputDigest>,
}

/// In-memory result of [`run_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub cells: Vec<CellAnalysis>,
    pub aggregates: Vec<AggregateAnalysis>,
    pub provenance: Provenance,
    /// Output files relative to the report directory, in write order.
    pub files: Vec<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read(path: &Path) -> Result<Vec<u8>, ReportError> {
    fs::read(path).map_err(|e| ReportError::io(path, e))
}

fn load_specs<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Vec<T>, ReportError> {
    serde_json::from_slice(bytes).map_err(|e| ReportError::Spec {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

impl Specs {
    fn add_rubrics(&mut self, path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
        for spec in load_specs::<RubricSpec>(path, bytes)? {
            spec.validate()?;
            self.rubrics.insert(spec.task_id.clone(), spec);
        }
        Ok(())
    }

    fn add_predicates(&mut self, path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
        for spec in load_specs::<PredicateSpec>(path, bytes)? {
            spec.validate()?;
            self.predicates.insert(spec.task_id.clone(), spec);
        }
        Ok(())
    }

    /// Reads JSON arrays of rubric and predicate specs.
    pub fn load(rubrics: Option<&Path>, predicates: Option<&Path>) -> Result<Self, ReportError> {
        let mut specs = Specs::default();
        if let Some(path) = rubrics {
            specs.add_rubrics(path, &read(path)?)?;
        }
        if let Some(path) = predicates {
            specs.add_predicates(path, &read(path)?)?;
        }
        Ok(specs)
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report values serialize");
    v.push(b'\n');
    v
}

fn opt_num(x: Option<f64>) -> String {
    x.map(csv_num).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

const CLD_HEADER: &[&str] = &[
    "policy_id",
    "display_name",
    "n",
    "s",
    "empirical_sr",
    "posterior_mean",
    "sr_letters",
    "tc_mean",
    "tc_letters",
];

const SUMMARY_HEADER: &[&str] = &[
    "task",
    "condition",
    "policy_id",
    "n",
    "s",
    "empirical_sr",
    "posterior_mean",
    "ci_lower",
    "ci_upper",
    "tc_mean",
    "sr_letters",
    "tc_letters",
];

struct CellRow {
    policy_id: String,
    display_name: String,
    n: u64,
    s: u64,
    empirical_sr: Option<f64>,
    posterior_mean: f64,
    ci: (f64, f64),
    tc_mean: Option<f64>,
    sr_letters: String,
    tc_letters: String,
}

fn cell_rows(cell: &CellAnalysis) -> Vec<CellRow> {
    cell.success
        .iter()
        .map(|p| {
            let tc = cell.completion.iter().find(|c| c.policy_id == p.policy_id);
            let tc_letters = cell
                .completion_comparison
                .as_ref()
                .and_then(|c| c.cld.letters_of(&p.policy_id))
                .unwrap_or_default();
            CellRow {
                policy_id: p.policy_id.clone(),
                display_name: p.display_name.clone(),
                n: p.n,
                s: p.s,
                empirical_sr: p.empirical_sr,
                posterior_mean: p.posterior.mean,
                ci: (p.posterior.credible_interval.lower, p.posterior.credible_interval.upper),
                tc_mean: tc.map(|t| t.mean),
                sr_letters: cell.binary.cld.letters_of(&p.policy_id).unwrap_or_default().to_string(),
                tc_letters: tc_letters.to_string(),
            }
        })
        .collect()
}

fn aggregate_rows(agg: &AggregateAnalysis, display: &BTreeMap<String, String>) -> Vec<CellRow> {
    agg.success
        .iter()
        .map(|p| CellRow {
            policy_id: p.policy_id.clone(),
            display_name: display.get(&p.policy_id).cloned().unwrap_or_default(),
            n: p.aggregate.posterior.n,
            s: p.aggregate.posterior.s,
            empirical_sr: p.empirical_sr,
            posterior_mean: p.mean,
            ci: (p.credible_interval.lower, p.credible_interval.upper),
            tc_mean: None,
            sr_letters: agg.binary.cld.letters_of(&p.policy_id).unwrap_or_default().to_string(),
            tc_letters: String::new(),
        })
        .collect()
}

fn cld_csv(rows: &[CellRow]) -> Vec<u8> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.policy_id.clone(),
                r.display_name.clone(),
                r.n.to_string(),
                r.s.to_string(),
                opt_num(r.empirical_sr),
                csv_num(r.posterior_mean),
                r.sr_letters.clone(),
                opt_num(r.tc_mean),
                r.tc_letters.clone(),
            ]
        })
        .collect();
    csv_bytes(CLD_HEADER, &rows)
}

fn summary_row(task: &str, condition: &str, r: &CellRow) -> Vec<String> {
    vec![
        task.to_string(),
        condition.to_string(),
        r.policy_id.clone(),
        r.n.to_string(),
        r.s.to_string(),
        opt_num(r.empirical_sr),
        csv_num(r.posterior_mean),
        csv_num(r.ci.0),
        csv_num(r.ci.1),
        opt_num(r.tc_mean),
        r.sr_letters.clone(),
        r.tc_letters.clone(),
    ]
}

/// Row of letters per task-condition plus one aggregate row per condition.
fn cld_table(policies: &[String], rows: &[(String, String, Vec<CellRow>)]) -> Vec<u8> {
    let mut header = vec!["task", "condition"];
    header.extend(policies.iter().map(String::as_str));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(task, cond, cells)| {
            let mut r = vec![task.clone(), cond.clone()];
            r.extend(cells.iter().map(|c| c.sr_letters.clone()));
            r
        })
        .collect();
    csv_bytes(&header, &body)
}

/// Label directory names must be single path components.
fn check_component(kind: &str, name: &str) -> Result<(), ReportError> {
    if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\']) || name == "aggregate" {
        return Err(ReportError::Config(format!("{kind} {name:?} cannot be used as a directory name")));
    }
    Ok(())
}

/// Builds every report file in memory. Pure in (inputs, config).
/// Parsed campaign inputs: specs, the pooled store and per-input digests.
#[derive(Debug, Clone)]
pub struct LoadedCampaign {
    pub specs: Specs,
    pub store: RolloutStore,
    pub inputs: Vec<InputDigest>,
    pub rejected_lines: Vec<RejectedLine>,
}

/// Reads the specs and logs a config references.
pub fn load_campaign(cfg: &CampaignConfig) -> Result<LoadedCampaign, ReportError> {
    let mut inputs = Vec::new();
    let mut digest = |shown: &Path, bytes: &[u8]| {
        inputs.push(InputDigest {
            path: shown.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        })
    };

    let mut specs = Specs::default();
    if let Some(p) = &cfg.rubrics {
        let path = cfg.resolve(p);
        let bytes = read(&path)?;
        digest(p, &bytes);
        specs.add_rubrics(&path, &bytes)?;
    }
    if let Some(p) = &cfg.predicates {
        let path = cfg.resolve(p);
        let bytes = read(&path)?;
        digest(p, &bytes);
        specs.add_predicates(&path, &bytes)?;
    }

    let mut store = RolloutStore::new();
    let mut rejected_lines = Vec::new();
    for log in &cfg.logs {
        let path = cfg.resolve(log);
        let bytes = read(&path)?;
        digest(log, &bytes);
        let ingested = parse_rollout_log(&path, LogFormat::Jsonl, &specs.rubrics)?;
        for r in ingested.rejects {
            rejected_lines.push(RejectedLine {
                log: log.display().to_string(),
                line: r.line,
                reason: r.reason,
            });
        }
        for rec in ingested.store.records() {
            store.insert(rec.clone())?;
        }
    }
    Ok(LoadedCampaign {
        specs,
        store,
        inputs,
        rejected_lines,
    })
}


pub fn build_report(cfg: &CampaignConfig) -> Result<(ReportBundle, BTreeMap<PathBuf, Vec<u8>>), ReportError> {
    for t in &cfg.tasks {
        check_component("task", t)?;
    }
    for c in &cfg.conditions {
        check_component("condition", &c.label())?;
    }
    let LoadedCampaign {
        specs,
        store,
        inputs,
        rejected_lines,
    } = load_campaign(cfg)?;
    let codes: std::collections::BTreeSet<&str> = cfg.policies.iter().map(|p| p.blinding_code.as_str()).collect();
    let unreported_records = store
        .records()
        .filter(|r| !cfg.tasks.contains(&r.task) || !cfg.conditions.contains(&r.condition) || !codes.contains(r.policy.as_str()))
        .count();

    let settings = cfg.settings();
    let jobs: Vec<(usize, usize)> = (0..cfg.conditions.len())
        .flat_map(|c| (0..cfg.tasks.len()).map(move |t| (c, t)))
        .collect();
    let results: Vec<(CellAnalysis, CellPooling)> = jobs
        .par_iter()
        .enumerate()
        .map(|(stream, &(c, t))| {
            analyze_cell(
                &store,
                &cfg.tasks[t],
                &cfg.conditions[c],
                &cfg.policies,
                &specs,
                &settings,
                stream as u64,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut aggregates = Vec::new();
    for (ci, cond) in cfg.conditions.iter().enumerate() {
        let pooling: Vec<CellPooling> = results
            .iter()
            .zip(&jobs)
            .filter(|(_, &(c, _))| c == ci)
            .map(|((_, p), _)| p.clone())
            .collect();
        aggregates.push(analyze_aggregate(cond, &cfg.tasks, &cfg.policies, &pooling, &settings)?);
    }

    let display: BTreeMap<String, String> = cfg
        .policies
        .iter()
        .map(|p| (p.policy_id.clone(), p.display_name.clone()))
        .collect();
    let ids: Vec<String> = cfg.policies.iter().map(|p| p.policy_id.clone()).collect();
    let mut files: BTreeMap<PathBuf, Vec<u8>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut put = |path: PathBuf, bytes: Vec<u8>, files: &mut BTreeMap<PathBuf, Vec<u8>>| {
        order.push(path.clone());
        files.insert(path, bytes);
    };
    let mut summary = Vec::new();
    let mut table = Vec::new();
    for (cell, _) in &results {
        let dir = PathBuf::from(&cell.task).join(&cell.condition);
        put(
            dir.join("sr_posterior.json"),
            json_bytes(&serde_json::json!({
                "task": cell.task,
                "condition": cell.condition,
                "credible_level": cfg.credible_level,
                "dangerous": cfg.dangerous,
                "policies": cell.success,
            })),
            &mut files,
        );
        put(
            dir.join("tc_raw.json"),
            json_bytes(&serde_json::json!({
                "task": cell.task,
                "condition": cell.condition,
                "policies": cell.completion,
            })),
            &mut files,
        );
        put(
            dir.join("comparisons.json"),
            json_bytes(&serde_json::json!({
                "task": cell.task,
                "condition": cell.condition,
                "binary": cell.binary,
                "task_completion": cell.completion_comparison,
                "notes": cell.notes,
            })),
            &mut files,
        );
        let rows = cell_rows(cell);
        put(dir.join("cld.csv"), cld_csv(&rows), &mut files);
        summary.extend(rows.iter().map(|r| summary_row(&cell.task, &cell.condition, r)));
        table.push((cell.task.clone(), cell.condition.clone(), rows));
    }
    for agg in &aggregates {
        let dir = PathBuf::from("aggregate").join(&agg.condition);
        put(
            dir.join("sr_posterior.json"),
            json_bytes(&serde_json::json!({
                "condition": agg.condition,
                "tasks": agg.tasks,
                "credible_level": cfg.credible_level,
                "policies": agg.success,
            })),
            &mut files,
        );
        put(
            dir.join("comparisons.json"),
            json_bytes(&serde_json::json!({
                "condition": agg.condition,
                "tasks": agg.tasks,
                "pooling": "round_robin",
                "binary": agg.binary,
            })),
            &mut files,
        );
        let rows = aggregate_rows(agg, &display);
        put(dir.join("cld.csv"), cld_csv(&rows), &mut files);
        summary.extend(rows.iter().map(|r| summary_row("aggregate", &agg.condition, r)));
        table.push(("aggregate".to_string(), agg.condition.clone(), rows));
    }
    put(PathBuf::from("summary.csv"), csv_bytes(SUMMARY_HEADER, &summary), &mut files);
    put(PathBuf::from("cld_table.csv"), cld_table(&ids, &table), &mut files);
    if let Some(plan) = cfg.plan() {
        let report = validate_store(&store, &plan)?;
        put(PathBuf::from("validation.json"), json_bytes(&report), &mut files);
    }

    let provenance = Provenance {
        config_version: cfg.version,
        evalkit_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        alpha: cfg.alpha,
        config_sha256: sha256_hex(cfg.to_toml().as_bytes()),
        inputs,
        rejected_lines,
        unreported_records,
        outputs: files
            .iter()
            .map(|(p, b)| InputDigest {
                path: p.display().to_string(),
                sha256: sha256_hex(b),
                bytes: b.len() as u64,
            })
            .collect(),
    };
    put(PathBuf::from("provenance.json"), json_bytes(&provenance), &mut files);

    Ok((
        ReportBundle {
            cells: results.into_iter().map(|(c, _)| c).collect(),
            aggregates,
            provenance,
            files: order,
        },
        files,
    ))
}

fn write_tree(root: &Path, files: &BTreeMap<PathBuf, Vec<u8>>) -> Result<(), ReportError> {
    for (rel, bytes) in files {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ReportError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| ReportError::io(&path, e))?;
    }
    Ok(())
}

/// Builds the report and writes it to `out_dir`. Files are staged in a
/// sibling directory and moved into place only when all writes succeed.
/// An existing `out_dir` is replaced only if it is empty or holds a
/// previous report.
pub fn run_report(cfg: &CampaignConfig, out_dir: &Path) -> Result<ReportBundle, ReportError> {
    if out_dir.exists() {
        let previous = out_dir.join("provenance.json").is_file();
        let empty = fs::read_dir(out_dir)
            .map_err(|e| ReportError::io(out_dir, e))?
            .next()
            .is_none();
        if !previous && !empty {
            return Err(ReportError::OutDirOccupied(out_dir.display().to_string()));
        }
    }
    let (bundle, files) = build_report(cfg)?;
    let name = out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    let parent = out_dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| ReportError::io(parent, e))?;
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| ReportError::io(&staging, e))?;
    }
    let staged = write_tree(&staging, &files).and_then(|_| {
        if out_dir.exists() {
            fs::remove_dir_all(out_dir).map_err(|e| ReportError::io(out_dir, e))?;
        }
        fs::rename(&staging, out_dir).map_err(|e| ReportError::io(out_dir, e))
    });
    if let Err(e) = staged {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    Ok(bundle)
}

/// Loads a campaign file and runs the report.
pub fn run_report_file(config_path: &Path, out_dir: &Path) -> Result<ReportBundle, ReportError> {
    let cfg = CampaignConfig::load(config_path)?;
    run_report(&cfg, out_dir)
}
