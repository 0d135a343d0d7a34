//! Synthetic outcomes and Monte Carlo checks of the comparison machinery.

mod fixture;

pub use fixture::{fixture_records, write_fixture_campaign, Fixture, FixturePolicy, FixtureSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparison::{
    excess, run_sequential, ComparisonError, PairedBinarySequence, SequentialBoundary, Verdict,
};

pub const CALIBRATION_REPORT_VERSION: u32 = 1;
pub const NULL_RATES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("correlation {0} outside [0, 1]")]
    Correlation(f64),
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("replications must be positive")]
    NoReplications,
    #[error("horizon must be positive")]
    NoHorizon,
    #[error("alpha {0} outside (0, 1)")]
    Alpha(f64),
    #[error("invalid kappa grid")]
    InvalidGrid,
    #[error("no kappa on the grid up to {max} keeps Type-I at or below {alpha} (worst rate {worst})")]
    GridTooCoarse { alpha: f64, max: f64, worst: f64 },
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
}

fn check_p(p: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SynthError::Probability(p))
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replication `rep` of stream `stream`, independent of scheduling.
pub fn derive_seed(seed: u64, stream: u64, rep: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPolicy {
    Binary { true_p: f64 },
    /// Probabilities over the TC lattice `{0, 1/m, …, 1}`.
    TaskCompletion { distribution: Vec<f64> },
}

impl SyntheticPolicy {
    pub fn validate(&self) -> Result<(), SynthError> {
        match self {
            SyntheticPolicy::Binary { true_p } => check_p(*true_p),
            SyntheticPolicy::TaskCompletion { distribution } => {
                for &p in distribution {
                    check_p(p)?;
                }
                let total: f64 = distribution.iter().sum();
                if distribution.len() < 2 || (total - 1.0).abs() > 1e-12 {
                    return Err(SynthError::NotNormalized(total));
                }
                Ok(())
            }
        }
    }
}

/// Lattice TC values drawn from `distribution`.
pub fn gen_tc_samples(distribution: &[f64], n: usize, seed: u64) -> Result<Vec<f64>, SynthError> {
    SyntheticPolicy::TaskCompletion {
        distribution: distribution.to_vec(),
    }
    .validate()?;
    let m = distribution.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = m;
            for (i, p) in distribution.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = i;
                    break;
                }
            }
            k as f64 / m as f64
        })
        .collect())
}

/// Binary outcomes drawn from `p`.
pub fn gen_binary_outcomes(p: f64, n: usize, seed: u64) -> Result<Vec<bool>, SynthError> {
    check_p(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.random::<f64>() < p).collect())
}

/// Paired outcomes over `n` shared initial conditions. Each IC has a
/// difficulty `u ~ U(0,1)`; with probability `correlation` both policies
/// see it, otherwise each draws its own. A policy succeeds iff its latent
/// is below its success rate, so marginals are exactly Bernoulli.
pub fn gen_paired_outcomes(
    p_a: f64,
    p_b: f64,
    n: usize,
    correlation: f64,
    seed: u64,
) -> Result<PairedBinarySequence, SynthError> {
    check_p(p_a)?;
    check_p(p_b)?;
    if !(0.0..=1.0).contains(&correlation) {
        return Err(SynthError::Correlation(correlation));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..n)
        .map(|_| {
            let shared: f64 = rng.random();
            let coupled = rng.random::<f64>() < correlation;
            let (ua, ub) = if coupled {
                (shared, shared)
            } else {
                (shared, rng.random::<f64>())
            };
            (ua < p_a, ub < p_b)
        })
        .collect();
    Ok(PairedBinarySequence::new(trials))
}

/// Largest boundary excess reached by the discordant walk; `-inf` when
/// there are no discordant pairs.
pub fn max_excess(seq: &PairedBinarySequence, horizon: usize) -> f64 {
    let mut n = 0;
    let mut wins = 0;
    let mut best = f64::NEG_INFINITY;
    for &(a, b) in &seq.trials {
        if a != b {
            n += 1;
            wins += usize::from(a);
            best = best.max(excess(wins, n, horizon));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for KappaGrid {
    fn default() -> Self {
        KappaGrid {
            lo: -5.0,
            hi: 15.0,
            step: 0.01,
        }
    }
}

impl KappaGrid {
    fn points(&self) -> Result<Vec<f64>, SynthError> {
        if !(self.step > 0.0 && self.hi >= self.lo && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(SynthError::InvalidGrid);
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| self.lo + i as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub horizon: usize,
    pub replications: usize,
    pub seed: u64,
    /// Within-pair correlation of the null draws.
    pub correlation: f64,
    pub null_rates: Vec<f64>,
    pub grid: KappaGrid,
    /// `(p_a, p_b)` pairs whose power is reported at the frozen boundary.
    pub effects: Vec<(f64, f64)>,
}

impl CalibrationConfig {
    pub fn new(alpha: f64, horizon: usize, replications: usize, seed: u64) -> Self {
        CalibrationConfig {
            alpha,
            horizon,
            replications,
            seed,
            correlation: 0.0,
            null_rates: NULL_RATES.to_vec(),
            grid: KappaGrid::default(),
            effects: vec![(0.5, 0.6), (0.5, 0.8), (0.9, 0.1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullRate {
    pub p: f64,
    /// Empirical false separation at the calibrated constant.
    pub type1: f64,
    /// Empirical false separation at the exact constant.
    pub type1_exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPower {
    pub p_a: f64,
    pub p_b: f64,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: u32,
    pub config: CalibrationConfig,
    pub replications: usize,
    /// Worst empirical Type-I over the null rates at `boundary_constant`.
    pub empirical_type1: f64,
    pub per_null_rate: Vec<NullRate>,
    /// Smallest grid constant with empirical Type-I at or below alpha.
    pub boundary_constant: f64,
    /// True when the grid floor already satisfies alpha, so the constant
    /// may not be the smallest possible.
    pub grid_floor_hit: bool,
    /// Worst-case constant from the exact fair-coin computation.
    pub exact_kappa: f64,
    /// Power at the frozen boundary, per configured effect.
    pub empirical_power: Vec<EffectPower>,
}

impl CalibrationReport {
    /// Boundary frozen for use by the comparison module: the larger of the
    /// Monte Carlo and exact constants.
    pub fn frozen_boundary(&self) -> SequentialBoundary {
        SequentialBoundary {
            alpha: self.config.alpha,
            horizon: self.config.horizon,
            kappa: self.boundary_constant.max(self.exact_kappa),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn rate(maxima: &[f64], kappa: f64) -> f64 {
    // maxima sorted ascending
    let below = maxima.partition_point(|&m| m < kappa);
    (maxima.len() - below) as f64 / maxima.len() as f64
}

pub fn calibrate_sequential_boundary(cfg: &CalibrationConfig) -> Result<CalibrationReport, SynthError> {
    if cfg.replications == 0 {
        return Err(SynthError::NoReplications);
    }
    if cfg.horizon == 0 {
        return Err(SynthError::NoHorizon);
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(SynthError::Alpha(cfg.alpha));
    }
    for &p in &cfg.null_rates {
        check_p(p)?;
    }
    let grid = cfg.grid.points()?;

    let maxima: Vec<Vec<f64>> = cfg
        .null_rates
        .iter()
        .enumerate()
        .map(|(stream, &p)| {
            let mut m = (0..cfg.replications)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(cfg.seed, stream as u64, rep as u64);
                    let seq = gen_paired_outcomes(p, p, cfg.horizon, cfg.correlation, seed)?;
                    Ok(max_excess(&seq, cfg.horizon))
                })
                .collect::<Result<Vec<f64>, SynthError>>()?;
            m.sort_by(f64::total_cmp);
            Ok(m)
        })
        .collect::<Result<_, SynthError>>()?;

    let worst = |kappa: f64| maxima.iter().map(|m| rate(m, kappa)).fold(0.0, f64::max);
    let idx = grid
        .iter()
        .position(|&k| worst(k) <= cfg.alpha)
        .ok_or_else(|| SynthError::GridTooCoarse {
            alpha: cfg.alpha,
            max: cfg.grid.hi,
            worst: worst(*grid.last().expect("grid nonempty")),
        })?;
    let kappa = grid[idx];
    let exact = SequentialBoundary::exact(cfg.alpha, cfg.horizon)?;

    let per_null_rate = cfg
        .null_rates
        .iter()
        .zip(&maxima)
        .map(|(&p, m)| NullRate {
            p,
            type1: rate(m, kappa),
            type1_exact: rate(m, exact.kappa),
        })
        .collect();

    let mut report = CalibrationReport {
        version: CALIBRATION_REPORT_VERSION,
        config: cfg.clone(),
        replications: cfg.replications,
        empirical_type1: worst(kappa),
        per_null_rate,
        boundary_constant: kappa,
        grid_floor_hit: idx == 0,
        exact_kappa: exact.kappa,
        empirical_power: Vec::new(),
    };
    let frozen = report.frozen_boundary();
    report.empirical_power = cfg
        .effects
        .iter()
        .enumerate()
        .map(|(i, &(p_a, p_b))| {
            let stream = (cfg.null_rates.len() + i) as u64;
            let power = power_with_boundary(p_a, p_b, cfg.correlation, &frozen, cfg.replications, cfg.seed, stream)?;
            Ok(EffectPower { p_a, p_b, power })
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(report)
}

fn power_with_boundary(
    p_a: f64,
    p_b: f64,
    correlation: f64,
    boundary: &SequentialBoundary,
    replications: usize,
    seed: u64,
    stream: u64,
) -> Result<f64, SynthError> {
    check_p(p_a)?;
    check_p(p_b)?;
    if replications == 0 {
        return Err(SynthError::NoReplications);
    }
    let hits = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let seq = gen_paired_outcomes(p_a, p_b, boundary.horizon, correlation, derive_seed(seed, stream, rep as u64))?;
            let v = run_sequential(&seq, boundary)?.verdict;
            let hit = if p_a > p_b {
                v == Verdict::ABetter
            } else if p_a < p_b {
                v == Verdict::BBetter
            } else {
                v != Verdict::NotSeparated
            };
            Ok(usize::from(hit))
        })
        .collect::<Result<Vec<usize>, SynthError>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / replications as f64)
}

/// Fraction of replications in which the sequential test over `n` paired
/// trials declares the correct direction. For `p_a == p_b` this is the
/// false-separation rate.
pub fn estimate_power(
    p_a: f64,
    p_b: f64,
    n: usize,
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<f64, SynthError> {
    estimate_power_correlated(p_a, p_b, n, 0.0, alpha, replications, seed)
}

pub fn estimate_power_correlated(
    p_a: f64,
    p_b: f64,
    n: usize,
    correlation: f64,
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<f64, SynthError> {
    if n == 0 {
        return Err(SynthError::NoHorizon);
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(SynthError::Alpha(alpha));
    }
    let boundary = SequentialBoundary::exact(alpha, n)?;
    power_with_boundary(p_a, p_b, correlation, &boundary, replications, seed, 0)
}
