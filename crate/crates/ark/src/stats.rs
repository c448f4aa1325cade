//! Trial aggregation and the independent two-sample t-test, with p-values via
//! the regularized incomplete beta function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("undefined variance: {0}")]
    UndefinedVariance(String),
    #[error("contract error: {0}")]
    Contract(String),
}

/// Named set of per-trial metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub label: String,
    pub samples: Vec<f64>,
}

/// Arithmetic mean and sample standard deviation (n-1 denominator).
pub fn mean_std(samples: &[f64]) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::UndefinedVariance(format!(
            "need >= 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Regularized incomplete beta function I_x(a, b) by the continued fraction
/// (modified Lentz), absolute tolerance 1e-10.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // ln B(a,b) via ln Gamma.
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();
    // Use the symmetry relation for faster convergence when x is large.
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(b, a, 1.0 - x);
    }
    // Continued fraction: I_x(a,b) = front / a * 1/(1 + d1/(1 + d2/(1 + ...)))
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        // Even step.
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-12 {
            break;
        }
    }
    front * h / a
}

/// Lanczos approximation of ln Gamma(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Independent two-sample t-test. Pooled-variance Student's test by default;
/// `welch` switches to the unequal-variance form with Welch-Satterthwaite
/// degrees of freedom. Degenerate conventions: both samples constant and equal
/// -> t=0, p=1; zero variance with unequal means -> p=0.
pub fn t_test_independent(a: &[f64], b: &[f64], welch: bool) -> Result<TTestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::UndefinedVariance(
            "t-test needs >= 2 samples per group".into(),
        ));
    }
    let (ma, sa) = mean_std(a)?;
    let (mb, sb) = mean_std(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sa * sa, sb * sb);
    if va == 0.0 && vb == 0.0 {
        return Ok(if ma == mb {
            TTestResult {
                t: 0.0,
                df: na + nb - 2.0,
                p: 1.0,
            }
        } else {
            TTestResult {
                t: if ma > mb {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                df: na + nb - 2.0,
                p: 0.0,
            }
        });
    }
    let (t, df) = if welch {
        let se2 = va / na + vb / nb;
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2
            / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
        (t, df)
    } else {
        let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
        (t, na + nb - 2.0)
    };
    let p = 2.0 * t_cdf(-t.abs(), df);
    Ok(TTestResult { t, df, p })
}

/// Classification of a condition against the best in its table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standing {
    Best,
    TiedWithBest,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStanding {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub standing: Standing,
    /// p-value of the t-test against the best condition (1.0 for the best
    /// itself).
    pub p_vs_best: f64,
}

/// Best-vs-others comparison: the condition with the highest mean is `Best`;
/// any other whose t-test against it is not significant at p<0.05 is
/// `TiedWithBest`; the rest are `Other`.
pub fn compare_conditions(
    conditions: &[TrialSet],
    alpha: f64,
) -> Result<Vec<ConditionStanding>, StatsError> {
    if conditions.is_empty() {
        return Err(StatsError::Contract("no conditions to compare".into()));
    }
    let n0 = conditions[0].samples.len();
    if conditions.iter().any(|c| c.samples.len() != n0) {
        return Err(StatsError::Contract(
            "conditions have mismatched trial counts".into(),
        ));
    }
    let stats: Vec<(f64, f64)> = conditions
        .iter()
        .map(|c| mean_std(&c.samples))
        .collect::<Result<_, _>>()?;
    // First index with the maximal mean, so ties resolve deterministically.
    let mut best = 0;
    for (i, s) in stats.iter().enumerate().skip(1) {
        if s.0 > stats[best].0 {
            best = i;
        }
    }
    let mut out = Vec::new();
    for (i, c) in conditions.iter().enumerate() {
        let (mean, std) = stats[i];
        let (standing, p) = if i == best {
            (Standing::Best, 1.0)
        } else {
            let r = t_test_independent(&c.samples, &conditions[best].samples, false)?;
            if r.p >= alpha {
                (Standing::TiedWithBest, r.p)
            } else {
                (Standing::Other, r.p)
            }
        };
        out.push(ConditionStanding {
            label: c.label.clone(),
            mean,
            std,
            standing,
            p_vs_best: p,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_analytic_cases() {
        let (m, s) = mean_std(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(mean_std(&[1.0]).is_err());
    }

    #[test]
    fn t_cdf_symmetry_and_center() {
        for df in [1.0, 4.0, 10.0, 30.0] {
            assert!((t_cdf(0.0, df) - 0.5).abs() < 1e-12, "df {df}");
            for x in [0.3, 1.0, 2.5, 7.0] {
                let s = t_cdf(-x, df) + t_cdf(x, df);
                assert!((s - 1.0).abs() < 1e-12, "df {df}, x {x}");
            }
        }
    }

    #[test]
    fn t_cdf_matches_known_values() {
        // With df=1 the t distribution is Cauchy: CDF(1) = 3/4.
        assert!((t_cdf(1.0, 1.0) - 0.75).abs() < 1e-10);
        // Large df approaches the normal CDF: CDF(1.96, 1e6) ~ 0.975.
        assert!((t_cdf(1.96, 1e6) - 0.975).abs() < 1e-3);
    }

    #[test]
    fn t_test_reference_case() {
        let r = t_test_independent(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], false).unwrap();
        assert!((r.t - (-3.6742)).abs() < 1e-3, "t = {}", r.t);
        assert_eq!(r.df, 4.0);
        assert!((r.p - 0.02131).abs() < 1e-3, "p = {}", r.p);
    }

    #[test]
    fn t_test_identical_samples() {
        let a = [0.3, 0.5, 0.7, 0.4];
        let r = t_test_independent(&a, &a, false).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn t_test_degenerate_conventions() {
        let r = t_test_independent(&[2.0, 2.0], &[2.0, 2.0], false).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = t_test_independent(&[2.0, 2.0], &[3.0, 3.0], false).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t < 0.0);
    }

    #[test]
    fn t_test_symmetry_and_scale_invariance() {
        let a = [1.0, 2.2, 2.9];
        let b = [3.5, 4.1, 5.2, 4.4];
        let r1 = t_test_independent(&a, &b, false).unwrap();
        let r2 = t_test_independent(&b, &a, false).unwrap();
        assert!((r1.t + r2.t).abs() < 1e-12);
        assert!((r1.p - r2.p).abs() < 1e-12);
        let c = 7.3;
        let sa: Vec<f64> = a.iter().map(|x| c * x).collect();
        let sb: Vec<f64> = b.iter().map(|x| c * x).collect();
        let r3 = t_test_independent(&sa, &sb, false).unwrap();
        assert!((r1.t - r3.t).abs() < 1e-10);
        assert!((r1.p - r3.p).abs() < 1e-10);
    }

    #[test]
    fn p_decreases_with_gap() {
        let a = [0.0, 0.1, -0.1, 0.05];
        let mut prev = 1.0;
        for gap in [0.2, 0.5, 1.0, 2.0] {
            let b: Vec<f64> = a.iter().map(|x| x + gap).collect();
            let r = t_test_independent(&a, &b, false).unwrap();
            assert!(r.p < prev, "gap {gap}: p {} !< {prev}", r.p);
            prev = r.p;
        }
    }

    #[test]
    fn welch_differs_under_unequal_variance() {
        let a = [1.0, 1.1, 0.9, 1.05, 0.95];
        let b = [2.0, 4.0, 0.5, 3.5, 1.0];
        let student = t_test_independent(&a, &b, false).unwrap();
        let welch = t_test_independent(&a, &b, true).unwrap();
        assert!((student.df - 8.0).abs() < 1e-12);
        assert!(welch.df < 8.0);
        assert_ne!(student.p, welch.p);
    }

    #[test]
    fn compare_conditions_tied_and_separated() {
        let same = TrialSet {
            label: "a".into(),
            samples: vec![0.5, 0.6, 0.55, 0.58],
        };
        let mut same2 = same.clone();
        same2.label = "b".into();
        let out = compare_conditions(&[same.clone(), same2], 0.05).unwrap();
        assert_eq!(out[0].standing, Standing::Best);
        assert_eq!(out[1].standing, Standing::TiedWithBest);

        let low = TrialSet {
            label: "low".into(),
            samples: vec![0.1, 0.12, 0.09, 0.11],
        };
        let out = compare_conditions(&[same, low], 0.05).unwrap();
        assert_eq!(out[0].standing, Standing::Best);
        assert_eq!(out[1].standing, Standing::Other);
    }

    #[test]
    fn compare_conditions_three_way_hand_oracle() {
        // Hand-computed classification: c ~ a (p > 0.05), b clearly below.
        let a = TrialSet {
            label: "a".into(),
            samples: vec![0.80, 0.82, 0.78, 0.81, 0.79, 0.80, 0.83, 0.77, 0.80, 0.81],
        };
        let b = TrialSet {
            label: "b".into(),
            samples: vec![0.60, 0.62, 0.58, 0.61, 0.59, 0.60, 0.63, 0.57, 0.60, 0.61],
        };
        let c = TrialSet {
            label: "c".into(),
            samples: vec![0.79, 0.81, 0.77, 0.82, 0.80, 0.78, 0.82, 0.78, 0.79, 0.82],
        };
        let out = compare_conditions(&[a, b, c], 0.05).unwrap();
        assert_eq!(out[0].standing, Standing::Best);
        assert_eq!(out[1].standing, Standing::Other);
        assert_eq!(out[2].standing, Standing::TiedWithBest);
    }

    #[test]
    fn inc_beta_bounds_and_complement() {
        assert_eq!(inc_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(inc_beta(2.0, 3.0, 1.0), 1.0);
        // I_x(a,b) + I_{1-x}(b,a) = 1.
        for x in [0.1, 0.35, 0.5, 0.72, 0.9] {
            let s = inc_beta(2.5, 1.5, x) + inc_beta(1.5, 2.5, 1.0 - x);
            assert!((s - 1.0).abs() < 1e-10, "x {x}");
        }
        // I_x(1,1) = x (uniform).
        for x in [0.2, 0.5, 0.8] {
            assert!((inc_beta(1.0, 1.0, x) - x).abs() < 1e-10);
        }
    }
}
