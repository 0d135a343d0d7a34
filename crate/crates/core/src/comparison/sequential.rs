//! Sequential paired test for binary outcomes.
//!
//! Only discordant pairs carry information about which policy is better.
//! Conditional on a pair being discordant, let `q` be the probability that
//! policy A is the one that succeeded; the null is `q = 1/2`. After `n`
//! discordant pairs with `w` A-wins the generalized likelihood ratio is
//!
//! ```text
//! L(n, w) = n * KL(w/n || 1/2)
//! ```
//!
//! and the test stops the first time `L(n, w) - g(n / N) >= kappa`, where
//! `N` is the planned horizon and
//!
//! ```text
//! g(t) = ln(1/t) + 1.5 ln(1 + ln(1/t))
//! ```
//!
//! is a Lai-type time-varying boundary shape (strict early, relaxing toward
//! the horizon). The constant `kappa` is the smallest value whose crossing
//! probability within `N` steps of a fair coin is at most `alpha`, computed
//! exactly by dynamic programming. Fewer discordant pairs only means a
//! shorter prefix of the same walk, so this bounds the Type-I error for
//! every null success rate and any within-pair correlation.

use serde::{Deserialize, Serialize};

use super::{ComparisonError, StopPoint, TestDecision, Verdict};

const BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedBinarySequence {
    /// `(outcome_A, outcome_B)` per aligned initial condition, in bundle order.
    pub trials: Vec<(bool, bool)>,
    /// Planned pairs lost because one side's rollout is absent.
    #[serde(default)]
    pub missing: usize,
}

impl PairedBinarySequence {
    pub fn new(trials: Vec<(bool, bool)>) -> Self {
        PairedBinarySequence { trials, missing: 0 }
    }

    /// Builds the sequence from aligned, possibly missing outcomes.
    pub fn from_aligned(a: &[Option<bool>], b: &[Option<bool>]) -> Self {
        let mut seq = PairedBinarySequence::default();
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (Some(x), Some(y)) => seq.trials.push((*x, *y)),
                _ => seq.missing += 1,
            }
        }
        seq.missing += a.len().abs_diff(b.len());
        seq
    }

    pub fn planned_len(&self) -> usize {
        self.trials.len() + self.missing
    }

    pub fn swapped(&self) -> Self {
        PairedBinarySequence {
            trials: self.trials.iter().map(|&(a, b)| (b, a)).collect(),
            missing: self.missing,
        }
    }
}

/// Generalized likelihood ratio of `wins` A-wins in `n` discordant pairs
/// against the fair-coin null.
pub fn glr_statistic(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n_f = n as f64;
    let term = |k: usize| {
        if k == 0 {
            0.0
        } else {
            let k = k as f64;
            k * (2.0 * k / n_f).ln()
        }
    };
    term(wins) + term(n - wins)
}

/// Boundary shape `g(n / horizon)`.
pub fn boundary_shape(n: usize, horizon: usize) -> f64 {
    let inv_t = horizon as f64 / n as f64;
    let l = inv_t.ln();
    l + 1.5 * (1.0 + l).ln()
}

/// Amount by which the statistic exceeds the boundary shape at step `n`.
/// The test rejects when this reaches `kappa`.
pub fn excess(wins: usize, n: usize, horizon: usize) -> f64 {
    glr_statistic(wins, n) - boundary_shape(n, horizon)
}

/// Probability that a fair-coin walk of `horizon` steps crosses the
/// boundary with constant `kappa`. This is the worst-case null.
pub fn null_crossing_probability(kappa: f64, horizon: usize) -> f64 {
    let mut alive = vec![0.0f64; horizon + 1];
    alive[0] = 1.0;
    let mut stopped = 0.0;
    for n in 1..=horizon {
        for w in (0..=n).rev() {
            let from_win = if w > 0 { alive[w - 1] } else { 0.0 };
            alive[w] = 0.5 * alive[w] + 0.5 * from_win;
        }
        for (w, mass) in alive.iter_mut().enumerate().take(n + 1) {
            if *mass > 0.0 && excess(w, n, horizon) >= kappa {
                stopped += *mass;
                *mass = 0.0;
            }
        }
    }
    stopped
}

/// Frozen boundary for a given level and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequentialBoundary {
    pub alpha: f64,
    pub horizon: usize,
    pub kappa: f64,
}

impl SequentialBoundary {
    /// Smallest `kappa` (to bisection precision, from above) whose exact
    /// worst-case null crossing probability is at most `alpha`.
    pub fn exact(alpha: f64, horizon: usize) -> Result<Self, ComparisonError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ComparisonError::InvalidAlpha(alpha));
        }
        if horizon == 0 {
            return Err(ComparisonError::EmptySequence);
        }
        let mut lo = -boundary_shape(1, horizon) - 1.0;
        let mut hi = horizon as f64 * std::f64::consts::LN_2 + 1.0;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if null_crossing_probability(mid, horizon) <= alpha {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(SequentialBoundary {
            alpha,
            horizon,
            kappa: hi,
        })
    }

    pub fn threshold(&self, n: usize) -> f64 {
        self.kappa + boundary_shape(n, self.horizon)
    }

    pub fn null_crossing_probability(&self) -> f64 {
        null_crossing_probability(self.kappa, self.horizon)
    }
}

/// Runs the test under an explicit boundary.
pub fn run_sequential(seq: &PairedBinarySequence, boundary: &SequentialBoundary) -> Result<TestDecision, ComparisonError> {
    if seq.trials.is_empty() {
        return Err(ComparisonError::EmptySequence);
    }
    if seq.planned_len() > boundary.horizon {
        return Err(ComparisonError::HorizonExceeded {
            trials: seq.planned_len(),
            horizon: boundary.horizon,
        });
    }
    let mut n = 0;
    let mut wins = 0;
    let mut last_stat = 0.0;
    for (idx, &(a, b)) in seq.trials.iter().enumerate() {
        if a == b {
            continue;
        }
        n += 1;
        wins += usize::from(a);
        last_stat = glr_statistic(wins, n);
        if excess(wins, n, boundary.horizon) >= boundary.kappa {
            let verdict = if 2 * wins > n { Verdict::ABetter } else { Verdict::BBetter };
            return Ok(TestDecision {
                verdict,
                stopped_at: StopPoint::Trial(idx),
                alpha_used: boundary.alpha,
                statistic: last_stat,
                p_value: None,
                df: None,
                informative: n,
                missing_pairs: seq.missing,
                degenerate: false,
            });
        }
    }
    Ok(TestDecision {
        verdict: Verdict::NotSeparated,
        stopped_at: StopPoint::All,
        alpha_used: boundary.alpha,
        statistic: last_stat,
        p_value: None,
        df: None,
        informative: n,
        missing_pairs: seq.missing,
        degenerate: false,
    })
}

/// Runs the test with the exact boundary for `alpha` at the sequence's
/// planned horizon.
pub fn sequential_paired_test(seq: &PairedBinarySequence, alpha: f64) -> Result<TestDecision, ComparisonError> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(ComparisonError::InvalidAlpha(alpha));
    }
    if seq.trials.is_empty() {
        return Err(ComparisonError::EmptySequence);
    }
    let boundary = SequentialBoundary::exact(alpha, seq.planned_len())?;
    run_sequential(seq, &boundary)
}
