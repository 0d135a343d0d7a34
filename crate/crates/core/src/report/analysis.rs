use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::DangerousPolicy;
use super::format::natural_cmp;
use super::ReportError;
use crate::comparison::{cld_letters, compare_all, interleave_round_robin, CldAssignment, ComparisonMatrix, MetricData};
use crate::posterior::{
    aggregate_tasks, beta_posterior, dirichlet_mean_posterior, raw_tc_distribution, AggregatePosterior,
    CredibleInterval, DensityGrid,
};
use crate::rollout::{CellKey, ConditionTag, PolicyRef, RolloutRecord, RolloutStore, TerminalReason};
use crate::scoring::{score_predicates, score_rubric, PredicateSpec, RubricSpec, TaskCompletion};
use crate::synthlab::derive_seed;

/// Analysis knobs shared by the report and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub alpha: f64,
    pub per_test_alpha: Option<f64>,
    pub seed: u64,
    pub dirichlet_draws: usize,
    pub credible_level: f64,
    pub dangerous: DangerousPolicy,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            alpha: 0.05,
            per_test_alpha: None,
            seed: 0,
            dirichlet_draws: 4000,
            credible_level: 0.95,
            dangerous: DangerousPolicy::CountAsFailure,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Specs {
    pub rubrics: BTreeMap<String, RubricSpec>,
    pub predicates: BTreeMap<String, PredicateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
    pub mode: Option<f64>,
    pub credible_interval: CredibleInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySuccess {
    pub policy_id: String,
    pub display_name: String,
    pub n: u64,
    pub s: u64,
    pub empirical_sr: Option<f64>,
    pub dangerous: usize,
    pub excluded: usize,
    pub posterior: BetaSummary,
    pub grid: DensityGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletSummary {
    pub expected_mean: f64,
    pub mc_mean: f64,
    pub mc_std_error: f64,
    pub draws: usize,
    pub seed: u64,
    pub grid: DensityGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCompletion {
    pub policy_id: String,
    pub samples: usize,
    pub milestones: usize,
    pub mean: f64,
    pub raw: DensityGrid,
    pub posterior: DirichletSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSection {
    pub matrix: ComparisonMatrix,
    pub cld: CldAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAnalysis {
    pub task: String,
    pub condition: String,
    pub success: Vec<PolicySuccess>,
    pub completion: Vec<PolicyCompletion>,
    pub binary: ComparisonSection,
    pub completion_comparison: Option<ComparisonSection>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy_id: String,
    pub cells: Vec<(u64, u64)>,
    pub aggregate: AggregatePosterior,
    pub empirical_sr: Option<f64>,
    pub mean: f64,
    pub credible_interval: CredibleInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateAnalysis {
    pub condition: String,
    pub tasks: Vec<String>,
    pub success: Vec<PolicyAggregate>,
    /// Pooled per-IC pairs, interleaved round-robin across tasks.
    pub binary: ComparisonSection,
}

/// Per-cell inputs kept for pooling across tasks.
#[derive(Debug, Clone)]
pub struct CellPooling {
    pub counts: Vec<(u64, u64)>,
    pub aligned: Vec<Vec<Option<bool>>>,
}

fn outcome(r: &RolloutRecord, dangerous: DangerousPolicy) -> Option<bool> {
    match (r.terminal_reason, dangerous) {
        (TerminalReason::Dangerous, DangerousPolicy::Exclude) => None,
        (TerminalReason::Dangerous, DangerousPolicy::CountAsFailure) => Some(false),
        _ => Some(r.success),
    }
}

/// Task completion from rubric answers, else predicate traces; `None` when
/// the record carries neither for a known spec.
pub fn task_completion(r: &RolloutRecord, specs: &Specs) -> Result<Option<TaskCompletion>, ReportError> {
    if !r.rubric_answers.is_empty() {
        if let Some(spec) = specs.rubrics.get(&r.task) {
            return Ok(Some(score_rubric(&r.rubric_answers, spec)?));
        }
    }
    if let (Some(traces), Some(spec)) = (&r.predicate_traces, specs.predicates.get(&r.task)) {
        let timeout = (r.ended_at - r.started_at).num_milliseconds() as f64 / 1000.0;
        return Ok(Some(score_predicates(traces, spec, timeout)?.tc));
    }
    Ok(None)
}

/// Outcomes aligned by bundle across policies. Records without a bundle id
/// are aligned by start time within each policy.
fn align(per_policy: &[Vec<&RolloutRecord>], dangerous: DangerousPolicy) -> Result<Vec<Vec<Option<bool>>>, ReportError> {
    let all_bundled = per_policy.iter().flatten().all(|r| r.bundle_id.is_some());
    if all_bundled {
        let mut keys: Vec<&str> = per_policy
            .iter()
            .flatten()
            .map(|r| r.bundle_id.as_deref().expect("checked"))
            .collect();
        keys.sort_by(|a, b| natural_cmp(a, b));
        keys.dedup();
        let index: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        per_policy
            .iter()
            .map(|recs| {
                let mut row = vec![None; keys.len()];
                for r in recs {
                    let b = r.bundle_id.as_deref().expect("checked");
                    let slot = &mut row[index[b]];
                    if slot.is_some() {
                        return Err(ReportError::DuplicateBundleSlot {
                            bundle_id: b.to_string(),
                            policy: r.policy.clone(),
                        });
                    }
                    // an excluded rollout leaves its pair missing
                    *slot = outcome(r, dangerous);
                }
                Ok(row)
            })
            .collect()
    } else {
        let len = per_policy.iter().map(Vec::len).max().unwrap_or(0);
        Ok(per_policy
            .iter()
            .map(|recs| {
                let mut sorted = recs.clone();
                sorted.sort_by(|a, b| a.started_at.cmp(&b.started_at).then_with(|| a.rollout_id.cmp(&b.rollout_id)));
                let mut row: Vec<Option<bool>> = sorted.iter().map(|r| outcome(r, dangerous)).collect();
                row.resize(len, None);
                row
            })
            .collect())
    }
}

fn section(policies: &[String], data: &MetricData, settings: &AnalysisSettings) -> Result<ComparisonSection, ReportError> {
    let matrix = compare_all(policies, data, settings.alpha, settings.per_test_alpha)?;
    let cld = cld_letters(&matrix)?;
    Ok(ComparisonSection { matrix, cld })
}

/// Everything reported for one (task, condition) cell. `stream` seeds the
/// cell's Monte Carlo draws.
pub fn analyze_cell(
    store: &RolloutStore,
    task: &str,
    condition: &ConditionTag,
    policies: &[PolicyRef],
    specs: &Specs,
    settings: &AnalysisSettings,
    stream: u64,
) -> Result<(CellAnalysis, CellPooling), ReportError> {
    let ids: Vec<String> = policies.iter().map(|p| p.policy_id.clone()).collect();
    let per_policy: Vec<Vec<&RolloutRecord>> = policies
        .iter()
        .map(|p| {
            store
                .cell(&CellKey {
                    task: task.to_string(),
                    policy: p.blinding_code.clone(),
                    condition: condition.clone(),
                })
                .collect()
        })
        .collect();
    let mut notes = Vec::new();

    let mut success = Vec::with_capacity(policies.len());
    let mut counts = Vec::with_capacity(policies.len());
    for (p, recs) in policies.iter().zip(&per_policy) {
        let outcomes: Vec<bool> = recs.iter().filter_map(|r| outcome(r, settings.dangerous)).collect();
        let n = outcomes.len() as u64;
        let s = outcomes.iter().filter(|&&o| o).count() as u64;
        let dangerous = recs.iter().filter(|r| r.terminal_reason == TerminalReason::Dangerous).count();
        let post = beta_posterior(s, n)?;
        counts.push((s, n));
        success.push(PolicySuccess {
            policy_id: p.policy_id.clone(),
            display_name: p.display_name.clone(),
            n,
            s,
            empirical_sr: post.empirical_rate(),
            dangerous,
            excluded: recs.len() - outcomes.len(),
            posterior: BetaSummary {
                alpha: post.alpha,
                beta: post.beta,
                mean: post.mean(),
                mode: post.mode(),
                credible_interval: post.credible_interval(settings.credible_level),
            },
            grid: post.density_grid(),
        });
    }

    let mut completion_rows = Vec::new();
    let mut tc_values: Vec<Vec<f64>> = Vec::with_capacity(policies.len());
    for (pi, (p, recs)) in policies.iter().zip(&per_policy).enumerate() {
        let mut samples = Vec::new();
        for r in recs {
            if settings.dangerous == DangerousPolicy::Exclude && r.terminal_reason == TerminalReason::Dangerous {
                continue;
            }
            if let Some(tc) = task_completion(r, specs)? {
                samples.push(tc);
            }
        }
        tc_values.push(samples.iter().map(TaskCompletion::value).collect());
        if samples.is_empty() {
            continue;
        }
        let m = samples[0].denominator();
        let raw = raw_tc_distribution(&samples)?;
        let seed = derive_seed(settings.seed, stream, pi as u64);
        let d = dirichlet_mean_posterior(&samples, m, settings.dirichlet_draws, seed)?;
        completion_rows.push(PolicyCompletion {
            policy_id: p.policy_id.clone(),
            samples: samples.len(),
            milestones: m,
            mean: raw.mean_marker,
            raw,
            posterior: DirichletSummary {
                expected_mean: d.posterior.expected_mean(),
                mc_mean: d.mc_mean,
                mc_std_error: d.mc_std_error,
                draws: d.draws,
                seed: d.seed,
                grid: d.grid,
            },
        });
    }

    let aligned = align(&per_policy, settings.dangerous)?;
    let binary = section(&ids, &MetricData::Binary(aligned.clone()), settings)?;
    let completion_comparison = if tc_values.iter().all(|v| v.len() >= 2) {
        Some(section(&ids, &MetricData::TaskCompletion(tc_values), settings)?)
    } else {
        if tc_values.iter().any(|v| !v.is_empty()) {
            notes.push("task completion comparison skipped: a policy has fewer than 2 scored rollouts".into());
        }
        None
    };
    let dangerous_total: usize = success.iter().map(|s| s.dangerous).sum();
    if dangerous_total > 0 {
        notes.push(match settings.dangerous {
            DangerousPolicy::CountAsFailure => format!("{dangerous_total} dangerous rollouts counted as failures"),
            DangerousPolicy::Exclude => format!("{dangerous_total} dangerous rollouts excluded"),
        });
    }

    Ok((
        CellAnalysis {
            task: task.to_string(),
            condition: condition.label(),
            success,
            completion: completion_rows,
            binary,
            completion_comparison,
            notes,
        },
        CellPooling { counts, aligned },
    ))
}

/// Pools the cells of one condition across tasks.
pub fn analyze_aggregate(
    condition: &ConditionTag,
    tasks: &[String],
    policies: &[PolicyRef],
    cells: &[CellPooling],
    settings: &AnalysisSettings,
) -> Result<AggregateAnalysis, ReportError> {
    let ids: Vec<String> = policies.iter().map(|p| p.policy_id.clone()).collect();
    let mut success = Vec::with_capacity(policies.len());
    for (pi, id) in ids.iter().enumerate() {
        let per_task: Vec<(u64, u64)> = cells.iter().map(|c| c.counts[pi]).collect();
        let agg = aggregate_tasks(&per_task)?;
        success.push(PolicyAggregate {
            policy_id: id.clone(),
            cells: per_task,
            empirical_sr: agg.posterior.empirical_rate(),
            mean: agg.posterior.mean(),
            credible_interval: agg.posterior.credible_interval(settings.credible_level),
            aggregate: agg,
        });
    }
    let pooled: Vec<Vec<Option<bool>>> = (0..ids.len())
        .map(|pi| {
            let per_task: Vec<Vec<Option<bool>>> = cells.iter().map(|c| c.aligned[pi].clone()).collect();
            interleave_round_robin(&per_task)
        })
        .collect();
    Ok(AggregateAnalysis {
        condition: condition.label(),
        tasks: tasks.to_vec(),
        success,
        binary: section(&ids, &MetricData::Binary(pooled), settings)?,
    })
}
