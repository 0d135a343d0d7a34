//! Two-sided Welch t-test for mean task completion.

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{ComparisonError, StopPoint, TestDecision, Verdict};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchStatistic {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_difference: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch statistic with Welch–Satterthwaite degrees of freedom. Returns
/// `None` when both sample variances are zero.
pub fn welch_statistic(a: &[f64], b: &[f64]) -> Option<WelchStatistic> {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ea = va / na;
    let eb = vb / nb;
    let se2 = ea + eb;
    if se2 <= 0.0 {
        return None;
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (ea * ea / (na - 1.0) + eb * eb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Some(WelchStatistic {
        t,
        df,
        p_value,
        mean_difference: ma - mb,
    })
}

pub fn welch_t_test(samples_a: &[f64], samples_b: &[f64], alpha: f64) -> Result<TestDecision, ComparisonError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ComparisonError::InvalidAlpha(alpha));
    }
    if samples_a.len() < 2 || samples_b.len() < 2 {
        return Err(ComparisonError::TooFewSamples {
            a: samples_a.len(),
            b: samples_b.len(),
        });
    }
    let direction = |diff: f64| {
        if diff > 0.0 {
            Verdict::ABetter
        } else {
            Verdict::BBetter
        }
    };
    let decision = match welch_statistic(samples_a, samples_b) {
        Some(w) => TestDecision {
            verdict: if w.p_value < alpha { direction(w.mean_difference) } else { Verdict::NotSeparated },
            stopped_at: StopPoint::All,
            alpha_used: alpha,
            statistic: w.t,
            p_value: Some(w.p_value),
            df: Some(w.df),
            informative: samples_a.len() + samples_b.len(),
            missing_pairs: 0,
            degenerate: false,
        },
        None => {
            // Both samples constant: equal means cannot be separated, distinct
            // means are separated by convention and flagged.
            let diff = samples_a[0] - samples_b[0];
            TestDecision {
                verdict: if diff == 0.0 { Verdict::NotSeparated } else { direction(diff) },
                stopped_at: StopPoint::All,
                alpha_used: alpha,
                statistic: if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY },
                p_value: Some(if diff == 0.0 { 1.0 } else { 0.0 }),
                df: None,
                informative: samples_a.len() + samples_b.len(),
                missing_pairs: 0,
                degenerate: true,
            }
        }
    };
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Student-t two-sided tail by Simpson quadrature of the density, an
    /// oracle independent of the library CDF.
    fn t_two_sided_p(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut acc = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        let central = acc * h / 3.0;
        1.0 - 2.0 * central
    }

    /// Lanczos approximation (g = 7).
    fn ln_gamma(x: f64) -> f64 {
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + 7.5;
        for (i, c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    fn textbook(a: &[f64], b: &[f64]) -> (f64, f64) {
        let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let v = |x: &[f64]| {
            let mu = m(x);
            x.iter().map(|y| (y - mu) * (y - mu)).sum::<f64>() / (x.len() - 1) as f64
        };
        let (sa, sb) = (v(a) / a.len() as f64, v(b) / b.len() as f64);
        let t = (m(a) - m(b)) / (sa + sb).sqrt();
        let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
        (t, df)
    }

    fn lattice(counts: &[usize], m: usize) -> Vec<f64> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k as f64 / m as f64, c))
            .collect()
    }

    #[test]
    fn identical_samples_not_separated() {
        let a = lattice(&[3, 5, 10, 20, 12], 4);
        let d = welch_t_test(&a, &a, 0.05).unwrap();
        assert_eq!(d.verdict, Verdict::NotSeparated);
        assert_eq!(d.p_value, Some(1.0));
    }

    #[test]
    fn high_vs_low_completion_separated() {
        let a = lattice(&[0, 0, 2, 8, 40], 4);
        let b = lattice(&[38, 9, 3, 0, 0], 4);
        let d = welch_t_test(&a, &b, 0.05).unwrap();
        assert_eq!(d.verdict, Verdict::ABetter);
        let (t, df) = textbook(&a, &b);
        assert!((d.statistic - t).abs() < 1e-12);
        assert!((d.df.unwrap() - df).abs() < 1e-9);
    }

    #[test]
    fn p_value_matches_quadrature() {
        let a = lattice(&[5, 10, 12, 13, 10], 4);
        let b = lattice(&[9, 12, 12, 10, 7], 4);
        let w = welch_statistic(&a, &b).unwrap();
        let (t, df) = textbook(&a, &b);
        let oracle = t_two_sided_p(t, df);
        assert!((w.p_value - oracle).abs() < 1e-8, "{} vs {oracle}", w.p_value);
    }

    #[test]
    fn unequal_variances_equal_means() {
        // both centered on 0.5, one tight, one spread
        let a = lattice(&[0, 10, 30, 10, 0], 4);
        let b = lattice(&[20, 0, 20, 0, 20], 4);
        let d = welch_t_test(&a, &b, 0.05).unwrap();
        assert_eq!(d.verdict, Verdict::NotSeparated);
        let df = d.df.unwrap();
        assert!(df < (a.len() + b.len() - 2) as f64);
        assert!((df - textbook(&a, &b).1).abs() < 1e-9);
    }

    #[test]
    fn degenerate_constant_samples() {
        let d = welch_t_test(&[0.5; 10], &[0.5; 10], 0.05).unwrap();
        assert_eq!(d.verdict, Verdict::NotSeparated);
        assert!(d.degenerate);
        let d = welch_t_test(&[1.0; 10], &[0.5; 10], 0.05).unwrap();
        assert_eq!(d.verdict, Verdict::ABetter);
        assert!(d.degenerate);
    }

    #[test]
    fn too_few_samples() {
        assert_eq!(
            welch_t_test(&[1.0], &[0.0, 1.0], 0.05),
            Err(ComparisonError::TooFewSamples { a: 1, b: 2 })
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sample() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec((0usize..=8).prop_map(|k| k as f64 / 8.0), 3..60)
        }

        proptest! {
            #[test]
            fn shift_swap_scale_invariance(a in sample(), b in sample(), shift in -3.0f64..3.0, scale in 0.1f64..10.0) {
                let Some(base) = welch_statistic(&a, &b) else { return Ok(()); };
                let sh = |xs: &[f64]| xs.iter().map(|x| x + shift).collect::<Vec<_>>();
                let sc = |xs: &[f64]| xs.iter().map(|x| x * scale).collect::<Vec<_>>();
                let shifted = welch_statistic(&sh(&a), &sh(&b)).unwrap();
                prop_assert!((shifted.p_value - base.p_value).abs() < 1e-9);
                let swapped = welch_statistic(&b, &a).unwrap();
                prop_assert!((swapped.p_value - base.p_value).abs() < 1e-12);
                let scaled = welch_statistic(&sc(&a), &sc(&b)).unwrap();
                prop_assert!((scaled.t - base.t).abs() < 1e-9 * base.t.abs().max(1.0));
                // verdicts agree unless the p-value sits on the threshold
                if (base.p_value - 0.05).abs() > 1e-9 {
                    let v0 = welch_t_test(&a, &b, 0.05).unwrap().verdict;
                    let v1 = welch_t_test(&sc(&a), &sc(&b), 0.05).unwrap().verdict;
                    prop_assert_eq!(v0, v1);
                }
            }
        }
    }
}
