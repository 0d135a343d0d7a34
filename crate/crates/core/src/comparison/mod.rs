//! Pairwise separation of policies with multiplicity control.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

mod cld;
mod sequential;
mod welch;

pub use cld::{cld_letters, insert_absorb, letters_from_columns, CldAssignment};
pub use sequential::{
    boundary_shape, excess, glr_statistic, null_crossing_probability, run_sequential, sequential_paired_test,
    PairedBinarySequence, SequentialBoundary,
};
pub use welch::{welch_statistic, welch_t_test, WelchStatistic};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComparisonError {
    #[error("need at least 2 policies, got {0}")]
    TooFewPolicies(usize),
    #[error("alpha must lie in the open unit interval (and below 0.5 for the sequential test), got {0}")]
    InvalidAlpha(f64),
    #[error("empty paired sequence")]
    EmptySequence,
    #[error("{trials} planned trials exceed the boundary horizon {horizon}")]
    HorizonExceeded { trials: usize, horizon: usize },
    #[error("Welch test needs at least 2 samples per side (got {a} and {b})")]
    TooFewSamples { a: usize, b: usize },
    #[error("missing data for policy {0:?}")]
    MissingPairData(String),
    #[error("outcome vectors for {a:?} and {b:?} are not aligned ({len_a} vs {len_b})")]
    Misaligned {
        a: String,
        b: String,
        len_a: usize,
        len_b: usize,
    },
    #[error("comparison matrix is incomplete")]
    IncompleteMatrix,
    #[error("{0} letters needed, display alphabet has 52")]
    TooManyLetters(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "A_better")]
    ABetter,
    #[serde(rename = "B_better")]
    BBetter,
    #[serde(rename = "not_separated")]
    NotSeparated,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::ABetter => Verdict::BBetter,
            Verdict::BBetter => Verdict::ABetter,
            Verdict::NotSeparated => Verdict::NotSeparated,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ABetter => "A_better",
            Verdict::BBetter => "B_better",
            Verdict::NotSeparated => "not_separated",
        }
    }
}

/// Trial index at which a sequential test stopped, or `All` if it consumed
/// every trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopPoint {
    Trial(usize),
    All,
}

impl Serialize for StopPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StopPoint::Trial(i) => s.serialize_u64(*i as u64),
            StopPoint::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for StopPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(StopPoint::Trial(i as usize)),
            Raw::Word(w) if w == "all" => Ok(StopPoint::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("invalid stop point {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDecision {
    pub verdict: Verdict,
    pub stopped_at: StopPoint,
    pub alpha_used: f64,
    /// GLR statistic for the sequential test, t statistic for Welch.
    pub statistic: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    /// Discordant pairs consumed (sequential) or total samples (Welch).
    pub informative: usize,
    pub missing_pairs: usize,
    pub degenerate: bool,
}

impl TestDecision {
    /// The same decision seen with the two policies swapped.
    pub fn flipped(&self) -> Self {
        TestDecision {
            verdict: self.verdict.flipped(),
            statistic: -self.statistic,
            ..self.clone()
        }
    }
}

pub fn bonferroni_alpha(global_alpha: f64, k: usize) -> Result<f64, ComparisonError> {
    if k < 2 {
        return Err(ComparisonError::TooFewPolicies(k));
    }
    if !(global_alpha > 0.0 && global_alpha < 1.0) {
        return Err(ComparisonError::InvalidAlpha(global_alpha));
    }
    Ok(global_alpha / (k * (k - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BinarySequential,
    TcWelch,
}

/// Per-policy data for [`compare_all`], indexed like the policy list.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricData {
    /// Outcomes aligned by pairing index (bundle order); `None` marks a
    /// missing rollout.
    Binary(Vec<Vec<Option<bool>>>),
    TaskCompletion(Vec<Vec<f64>>),
}

impl MetricData {
    pub fn metric(&self) -> Metric {
        match self {
            MetricData::Binary(_) => Metric::BinarySequential,
            MetricData::TaskCompletion(_) => Metric::TcWelch,
        }
    }

    fn len(&self) -> usize {
        match self {
            MetricData::Binary(v) => v.len(),
            MetricData::TaskCompletion(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub a: String,
    pub b: String,
    pub decision: TestDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub policies: Vec<String>,
    pub metric: Metric,
    pub global_alpha: f64,
    pub per_test_alpha: f64,
    /// Upper triangle in row-major order: (0,1), (0,2), …, (1,2), …
    pub decisions: Vec<PairDecision>,
}

fn upper_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * (2 * k - i - 1) / 2 + (j - i - 1)
}

impl ComparisonMatrix {
    /// Decision for `(i, j)` read in that orientation.
    pub fn decision(&self, i: usize, j: usize) -> Option<TestDecision> {
        let k = self.policies.len();
        if i == j || i >= k || j >= k {
            return None;
        }
        if i < j {
            self.decisions.get(upper_index(k, i, j)).map(|d| d.decision.clone())
        } else {
            self.decisions.get(upper_index(k, j, i)).map(|d| d.decision.flipped())
        }
    }

    pub fn verdict(&self, i: usize, j: usize) -> Option<Verdict> {
        self.decision(i, j).map(|d| d.verdict)
    }

    pub fn separated(&self, i: usize, j: usize) -> bool {
        self.verdict(i, j).is_some_and(|v| v != Verdict::NotSeparated)
    }
}

/// Interleaves per-task aligned outcome vectors round-robin so a pooled
/// sequence alternates tasks: t0[0], t1[0], t2[0], t0[1], …
pub fn interleave_round_robin<T: Clone>(per_task: &[Vec<T>]) -> Vec<T> {
    let longest = per_task.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(per_task.iter().map(Vec::len).sum());
    for idx in 0..longest {
        for task in per_task {
            if let Some(v) = task.get(idx) {
                out.push(v.clone());
            }
        }
    }
    out
}

/// Runs all `k(k-1)/2` pairwise tests. The per-test level is the Bonferroni
/// level unless `alpha_override` is given.
pub fn compare_all(
    policies: &[String],
    data: &MetricData,
    global_alpha: f64,
    alpha_override: Option<f64>,
) -> Result<ComparisonMatrix, ComparisonError> {
    let k = policies.len();
    let bonferroni = bonferroni_alpha(global_alpha, k)?;
    let per_test_alpha = alpha_override.unwrap_or(bonferroni);
    if data.len() != k {
        let missing = policies.get(data.len()).cloned().unwrap_or_default();
        return Err(ComparisonError::MissingPairData(missing));
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();

    let decisions: Result<Vec<TestDecision>, ComparisonError> = match data {
        MetricData::Binary(outcomes) => {
            let horizon = outcomes[0].len();
            for (p, o) in policies.iter().zip(outcomes) {
                if o.len() != horizon {
                    return Err(ComparisonError::Misaligned {
                        a: policies[0].clone(),
                        b: p.clone(),
                        len_a: horizon,
                        len_b: o.len(),
                    });
                }
            }
            if !(per_test_alpha > 0.0 && per_test_alpha < 0.5) {
                return Err(ComparisonError::InvalidAlpha(per_test_alpha));
            }
            let boundary = SequentialBoundary::exact(per_test_alpha, horizon.max(1))?;
            pairs
                .par_iter()
                .map(|&(i, j)| {
                    let seq = PairedBinarySequence::from_aligned(&outcomes[i], &outcomes[j]);
                    if seq.trials.is_empty() {
                        return Err(ComparisonError::MissingPairData(format!("{}/{}", policies[i], policies[j])));
                    }
                    run_sequential(&seq, &boundary)
                })
                .collect()
        }
        MetricData::TaskCompletion(samples) => pairs
            .par_iter()
            .map(|&(i, j)| welch_t_test(&samples[i], &samples[j], per_test_alpha))
            .collect(),
    };
    let decisions = decisions?
        .into_iter()
        .zip(&pairs)
        .map(|(decision, &(i, j))| PairDecision {
            a: policies[i].clone(),
            b: policies[j].clone(),
            decision,
        })
        .collect();
    Ok(ComparisonMatrix {
        policies: policies.to_vec(),
        metric: data.metric(),
        global_alpha,
        per_test_alpha,
        decisions,
    })
}
