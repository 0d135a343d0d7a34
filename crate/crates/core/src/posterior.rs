//! Bayesian characterization of individual policies.
//!
//! Success rates get a conjugate Beta posterior under the uniform prior.
//! Mean task completion gets a Dirichlet posterior over the completion
//! lattice, pushed through the mean by Monte Carlo.
//!
//! Every [`DensityGrid`] is normalized so that its trapezoid integral over
//! `support` is one; this is the contract the violin exporters rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

use crate::scoring::TaskCompletion;

pub const BETA_GRID_POINTS: usize = 512;
pub const MIN_DIRICHLET_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PosteriorError {
    #[error("successes ({s}) exceed trials ({n})")]
    SuccessesExceedTrials { s: u64, n: u64 },
    #[error("sample {value} is not on the 1/{m} completion lattice")]
    OffLattice { value: String, m: usize },
    #[error("milestone count must be at least 1")]
    NoMilestones,
    #[error("at least {MIN_DIRICHLET_DRAWS} Monte Carlo draws required, got {0}")]
    TooFewDraws(usize),
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CredibleInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Beta posterior of a Bernoulli success rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
    pub n: u64,
    pub s: u64,
}

impl BetaPosterior {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let t = self.alpha + self.beta;
        self.alpha * self.beta / (t * t * (t + 1.0))
    }

    /// Mode of the density; `None` for the flat prior.
    pub fn mode(&self) -> Option<f64> {
        match (self.alpha > 1.0, self.beta > 1.0) {
            (true, true) => Some((self.alpha - 1.0) / (self.alpha + self.beta - 2.0)),
            (false, true) => Some(0.0),
            (true, false) => Some(1.0),
            (false, false) => None,
        }
    }

    /// Raw success fraction `s / n`; `None` without trials.
    pub fn empirical_rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.s as f64 / self.n as f64)
    }

    fn dist(&self) -> Beta {
        Beta::new(self.alpha, self.beta).expect("posterior parameters are positive")
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let d = self.dist();
        // statrs returns inf at the boundary for a == 1 or b == 1 in some
        // versions; the limit is finite there.
        let v = d.pdf(x);
        if v.is_finite() {
            v
        } else if x <= 0.0 && self.alpha == 1.0 {
            self.beta
        } else if x >= 1.0 && self.beta == 1.0 {
            self.alpha
        } else {
            v
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.dist().inverse_cdf(p)
    }

    /// Equal-tailed interval holding `level` of the posterior mass.
    pub fn credible_interval(&self, level: f64) -> CredibleInterval {
        let tail = (1.0 - level) / 2.0;
        CredibleInterval {
            level,
            lower: self.quantile(tail),
            upper: self.quantile(1.0 - tail),
        }
    }

    /// Analytic density on a 512-point grid: half uniform over [0, 1], half
    /// at posterior quantiles so that sharply peaked posteriors stay resolved.
    pub fn density_grid(&self) -> DensityGrid {
        let half = BETA_GRID_POINTS / 2;
        let mut support: Vec<f64> = (0..half).map(|i| i as f64 / (half - 1) as f64).collect();
        support.extend((0..half).map(|i| self.quantile((i as f64 + 0.5) / half as f64)));
        support.sort_by(f64::total_cmp);
        support.dedup();
        let density = support.iter().map(|&x| self.pdf(x)).collect();
        let mut grid = DensityGrid {
            support,
            density,
            kind: DensityKind::Analytic,
            mean_marker: self.mean(),
            n: Some(self.n),
            s: Some(self.s),
            counts: None,
        };
        grid.normalize();
        grid
    }
}

pub fn beta_posterior(s: u64, n: u64) -> Result<BetaPosterior, PosteriorError> {
    if s > n {
        return Err(PosteriorError::SuccessesExceedTrials { s, n });
    }
    Ok(BetaPosterior {
        alpha: s as f64 + 1.0,
        beta: (n - s) as f64 + 1.0,
        n,
        s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Analytic,
    MonteCarlo,
    /// Histogram of raw observations on the completion lattice.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub support: Vec<f64>,
    pub density: Vec<f64>,
    pub kind: DensityKind,
    pub mean_marker: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
}

/// Trapezoid quadrature weight of each grid node.
pub fn trapezoid_weights(support: &[f64]) -> Vec<f64> {
    let n = support.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = support[i] - support[i - 1];
        w[i - 1] += h / 2.0;
        w[i] += h / 2.0;
    }
    w
}

impl DensityGrid {
    pub fn integral(&self) -> f64 {
        trapezoid_weights(&self.support)
            .iter()
            .zip(&self.density)
            .map(|(w, d)| w * d)
            .sum()
    }

    /// Trapezoid estimate of the mean of the gridded density.
    pub fn grid_mean(&self) -> f64 {
        trapezoid_weights(&self.support)
            .iter()
            .zip(&self.support)
            .zip(&self.density)
            .map(|((w, x), d)| w * x * d)
            .sum::<f64>()
            / self.integral()
    }

    fn normalize(&mut self) {
        let z = self.integral();
        if z > 0.0 {
            self.density.iter_mut().for_each(|d| *d /= z);
        }
    }

    /// Density from point masses spread linearly onto a grid. Mass and first
    /// moment of the masses are preserved exactly under the trapezoid rule.
    fn from_masses(support: Vec<f64>, masses: &[(f64, f64)], kind: DensityKind, mean_marker: f64) -> Self {
        let n = support.len();
        let mut weight = vec![0.0; n];
        let lo = support[0];
        let hi = support[n - 1];
        let total: f64 = masses.iter().map(|m| m.1).sum();
        for &(x, mass) in masses {
            let x = x.clamp(lo, hi);
            let j = support.partition_point(|&g| g <= x).clamp(1, n - 1) - 1;
            let span = support[j + 1] - support[j];
            let t = if span > 0.0 { (x - support[j]) / span } else { 0.0 };
            weight[j] += mass * (1.0 - t);
            weight[j + 1] += mass * t;
        }
        let w = trapezoid_weights(&support);
        let density = weight.iter().zip(&w).map(|(m, w)| m / (w * total)).collect();
        DensityGrid {
            support,
            density,
            kind,
            mean_marker,
            n: None,
            s: None,
            counts: None,
        }
    }
}

/// Posterior over category probabilities of the completion lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletMeanPosterior {
    pub category_values: Vec<f64>,
    pub counts: Vec<u64>,
}

impl DirichletMeanPosterior {
    pub fn new(counts: Vec<u64>) -> Result<Self, PosteriorError> {
        if counts.len() < 2 {
            return Err(PosteriorError::NoMilestones);
        }
        let m = counts.len() - 1;
        Ok(DirichletMeanPosterior {
            category_values: (0..=m).map(|i| i as f64 / m as f64).collect(),
            counts,
        })
    }

    pub fn from_samples(samples: &[TaskCompletion], m: usize) -> Result<Self, PosteriorError> {
        if m < 1 {
            return Err(PosteriorError::NoMilestones);
        }
        let mut counts = vec![0u64; m + 1];
        for s in samples {
            if s.denominator() != m {
                return Err(PosteriorError::OffLattice {
                    value: format!("{}/{}", s.numerator(), s.denominator()),
                    m,
                });
            }
            counts[s.numerator()] += 1;
        }
        Self::new(counts)
    }

    /// Posterior concentration under the uniform prior: counts + 1.
    pub fn concentration(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 + 1.0).collect()
    }

    /// E[Σ v_i θ_i] = Σ v_i (c_i + 1) / (N + m + 1).
    pub fn expected_mean(&self) -> f64 {
        let conc = self.concentration();
        let total: f64 = conc.iter().sum();
        self.category_values.iter().zip(&conc).map(|(v, a)| v * a).sum::<f64>() / total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirichletMeanDensity {
    pub posterior: DirichletMeanPosterior,
    pub grid: DensityGrid,
    pub mc_mean: f64,
    pub mc_std_error: f64,
    pub draws: usize,
    pub seed: u64,
}

pub fn dirichlet_mean_posterior(
    tc_samples: &[TaskCompletion],
    m: usize,
    draws: usize,
    seed: u64,
) -> Result<DirichletMeanDensity, PosteriorError> {
    let posterior = DirichletMeanPosterior::from_samples(tc_samples, m)?;
    if draws < MIN_DIRICHLET_DRAWS {
        return Err(PosteriorError::TooFewDraws(draws));
    }
    let gammas: Vec<Gamma<f64>> = posterior
        .concentration()
        .into_iter()
        .map(|a| Gamma::new(a, 1.0).expect("shape is positive"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut total = 0.0;
        let mut weighted = 0.0;
        for (g, v) in gammas.iter().zip(&posterior.category_values) {
            let x = g.sample(&mut rng);
            total += x;
            weighted += x * v;
        }
        means.push(weighted / total);
    }
    let mc_mean = means.iter().sum::<f64>() / draws as f64;
    let var = means.iter().map(|x| (x - mc_mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let support: Vec<f64> = (0..BETA_GRID_POINTS)
        .map(|i| i as f64 / (BETA_GRID_POINTS - 1) as f64)
        .collect();
    let masses: Vec<(f64, f64)> = means.iter().map(|&x| (x, 1.0)).collect();
    let mut grid = DensityGrid::from_masses(support, &masses, DensityKind::MonteCarlo, posterior.expected_mean());
    grid.counts = Some(posterior.counts.clone());
    grid.n = Some(tc_samples.len() as u64);
    Ok(DirichletMeanDensity {
        posterior,
        grid,
        mc_mean,
        mc_std_error: (var / draws as f64).sqrt(),
        draws,
        seed,
    })
}

/// Lattice histogram of raw task-completion values.
pub fn raw_tc_distribution(tc_samples: &[TaskCompletion]) -> Result<DensityGrid, PosteriorError> {
    let first = tc_samples.first().ok_or(PosteriorError::Empty)?;
    let m = first.denominator();
    let posterior = DirichletMeanPosterior::from_samples(tc_samples, m)?;
    let support = posterior.category_values.clone();
    let masses: Vec<(f64, f64)> = support
        .iter()
        .zip(&posterior.counts)
        .map(|(&v, &c)| (v, c as f64))
        .collect();
    let numer: usize = tc_samples.iter().map(TaskCompletion::numerator).sum();
    let mean = numer as f64 / (m * tc_samples.len()) as f64;
    let mut grid = DensityGrid::from_masses(support, &masses, DensityKind::Empirical, mean);
    grid.n = Some(tc_samples.len() as u64);
    grid.counts = Some(posterior.counts);
    Ok(grid)
}

/// Pooled posterior over several tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePosterior {
    pub posterior: BetaPosterior,
    pub tasks: usize,
    /// Pooling fixed per-task trial counts treats the trials as an
    /// exchangeable rather than i.i.d. sequence.
    pub exchangeability_caveat: bool,
}

pub fn aggregate_tasks(cells: &[(u64, u64)]) -> Result<AggregatePosterior, PosteriorError> {
    if cells.is_empty() {
        return Err(PosteriorError::Empty);
    }
    let mut s_total = 0;
    let mut n_total = 0;
    for &(s, n) in cells {
        if s > n {
            return Err(PosteriorError::SuccessesExceedTrials { s, n });
        }
        s_total += s;
        n_total += n;
    }
    Ok(AggregatePosterior {
        posterior: beta_posterior(s_total, n_total)?,
        tasks: cells.len(),
        exchangeability_caveat: cells.len() > 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule as an independent quadrature oracle.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * h / 3.0
    }

    #[test]
    fn zero_of_fifty() {
        let p = beta_posterior(0, 50).unwrap();
        assert_eq!((p.alpha, p.beta), (1.0, 51.0));
        assert_eq!(p.empirical_rate(), Some(0.0));
        assert!((p.mean() - 1.0 / 52.0).abs() < 1e-15);
        assert_eq!(p.mode(), Some(0.0));
    }

    #[test]
    fn no_data_is_uniform_prior() {
        let p = beta_posterior(0, 0).unwrap();
        assert_eq!((p.alpha, p.beta), (1.0, 1.0));
        assert_eq!(p.mode(), None);
        assert_eq!(p.empirical_rate(), None);
        assert!((p.pdf(0.3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kiwi_cell() {
        let p = beta_posterior(27, 200).unwrap();
        assert_eq!(p.empirical_rate(), Some(0.135));
        assert!((p.mean() - 28.0 / 202.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_counts() {
        assert_eq!(
            beta_posterior(3, 2),
            Err(PosteriorError::SuccessesExceedTrials { s: 3, n: 2 })
        );
    }

    #[test]
    fn grid_integrates_to_one_and_matches_mean() {
        for (s, n) in [(0, 50), (0, 200), (27, 200), (50, 50), (3, 7), (0, 0), (400, 800)] {
            let p = beta_posterior(s, n).unwrap();
            let g = p.density_grid();
            assert!(g.support.len() <= BETA_GRID_POINTS && g.support.len() > BETA_GRID_POINTS - 4);
            assert_eq!(g.support[0], 0.0);
            assert_eq!(*g.support.last().unwrap(), 1.0);
            assert!(g.support.windows(2).all(|w| w[0] < w[1]));
            assert!((g.integral() - 1.0).abs() < 1e-6, "({s},{n}) integral {}", g.integral());
            assert!((g.grid_mean() - p.mean()).abs() < 1e-4, "({s},{n})");
            assert!(g.density.iter().all(|&d| d >= 0.0 && d.is_finite()));
        }
    }

    #[test]
    fn analytic_density_agrees_with_quadrature() {
        let p = beta_posterior(5, 20).unwrap();
        let mass = simpson(|x| p.pdf(x), 0.0, 1.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-9);
        let mean = simpson(|x| x * p.pdf(x), 0.0, 1.0, 20_000);
        assert!((mean - p.mean()).abs() < 1e-9);
    }

    #[test]
    fn credible_interval_shrinks_like_root_n() {
        let widths: Vec<f64> = [50u64, 200, 800]
            .iter()
            .map(|&n| beta_posterior(n * 3 / 10, n).unwrap().credible_interval(0.95).width())
            .collect();
        // quadrupling n halves the width
        for w in widths.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        }
        let ci = beta_posterior(30, 100).unwrap().credible_interval(0.95);
        assert!(ci.lower < 0.3 && 0.3 < ci.upper);
    }

    fn tc(k: usize, m: usize) -> TaskCompletion {
        TaskCompletion::from_counts(k, m)
    }

    #[test]
    fn dirichlet_all_complete() {
        let samples = vec![tc(4, 4); 50];
        let d = dirichlet_mean_posterior(&samples, 4, 20_000, 7).unwrap();
        // closed form: (0*1 + .25*1 + .5*1 + .75*1 + 1*51) / 55
        let oracle = (0.25 + 0.5 + 0.75 + 51.0) / 55.0;
        assert!((d.grid.mean_marker - oracle).abs() < 1e-15);
        assert!((d.mc_mean - oracle).abs() < 3.0 * d.mc_std_error + 1e-12);
        let peak = d
            .grid
            .support
            .iter()
            .zip(&d.grid.density)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(*peak > 0.85);
        assert!((d.grid.integral() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dirichlet_symmetric_cases() {
        let d = dirichlet_mean_posterior(&[], 4, 1000, 1).unwrap();
        assert!((d.grid.mean_marker - 0.5).abs() < 1e-15);
        let mut samples = vec![tc(0, 4); 10];
        samples.extend(vec![tc(4, 4); 10]);
        let d = dirichlet_mean_posterior(&samples, 4, 1000, 1).unwrap();
        assert!((d.grid.mean_marker - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_converges_at_100k_draws() {
        let samples: Vec<_> = [0, 1, 1, 2, 3, 3, 3, 4].iter().map(|&k| tc(k, 4)).collect();
        let d = dirichlet_mean_posterior(&samples, 4, 100_000, 11).unwrap();
        assert!((d.mc_mean - d.grid.mean_marker).abs() < 3.0 * d.mc_std_error);
        // linear binning keeps the draws' first moment
        assert!((d.grid.grid_mean() - d.mc_mean).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_errors_and_determinism() {
        assert_eq!(
            dirichlet_mean_posterior(&[tc(1, 3)], 4, 1000, 0).unwrap_err(),
            PosteriorError::OffLattice { value: "1/3".into(), m: 4 }
        );
        assert_eq!(dirichlet_mean_posterior(&[], 0, 1000, 0).unwrap_err(), PosteriorError::NoMilestones);
        assert_eq!(dirichlet_mean_posterior(&[], 2, 999, 0).unwrap_err(), PosteriorError::TooFewDraws(999));
        let a = dirichlet_mean_posterior(&[tc(1, 2)], 2, 2000, 5).unwrap();
        let b = dirichlet_mean_posterior(&[tc(1, 2)], 2, 2000, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn raw_spike_and_uniform() {
        let g = raw_tc_distribution(&vec![tc(2, 4); 50]).unwrap();
        assert_eq!(g.mean_marker, 0.5);
        assert_eq!(g.density, vec![0.0, 0.0, 4.0, 0.0, 0.0]);
        assert!((g.integral() - 1.0).abs() < 1e-12);

        let g = raw_tc_distribution(&(0..=4).map(|k| tc(k, 4)).collect::<Vec<_>>()).unwrap();
        assert_eq!(g.mean_marker, 0.5);
        assert_eq!(g.counts, Some(vec![1; 5]));
        assert!((g.integral() - 1.0).abs() < 1e-12);
        assert_eq!(raw_tc_distribution(&[]), Err(PosteriorError::Empty));
    }

    #[test]
    fn raw_mean_matches_arithmetic_mean() {
        // bimodal shape: many partial completions plus a cluster at the top
        let ks = [0, 1, 1, 2, 2, 2, 3, 3, 6, 7, 7, 7, 7, 7, 5, 4, 1, 0, 2, 7];
        let samples: Vec<_> = ks.iter().map(|&k| tc(k, 7)).collect();
        let g = raw_tc_distribution(&samples).unwrap();
        let oracle = ks.iter().map(|&k| k as f64 / 7.0).sum::<f64>() / ks.len() as f64;
        assert!((g.mean_marker - oracle).abs() < 1e-12);
    }

    #[test]
    fn aggregate_pools_counts() {
        let agg = aggregate_tasks(&[(10, 50), (20, 50), (45, 50)]).unwrap();
        assert_eq!(agg.posterior.n, 150);
        assert_eq!(agg.posterior, beta_posterior(75, 150).unwrap());
        assert!(agg.exchangeability_caveat);
        let perm = aggregate_tasks(&[(45, 50), (10, 50), (20, 50)]).unwrap();
        assert_eq!(agg, perm);
        let single = aggregate_tasks(&[(3, 9)]).unwrap();
        assert_eq!(single.posterior, beta_posterior(3, 9).unwrap());
        assert_eq!(aggregate_tasks(&[]), Err(PosteriorError::Empty));
    }
}
