//! Error-rate estimation, complexity extraction and trend fits.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fedsync::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorRate {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation over `sqrt(n)`).
    pub stderr: f64,
    pub count: usize,
}

/// Mean and standard error of per-seed errors.
pub fn error_rate(errors: &[f64]) -> Result<ErrorRate> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let stderr = if errors.len() > 1 {
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(ErrorRate {
        mean,
        stderr,
        count: errors.len(),
    })
}

/// Median of a nonempty list.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Sample complexity `|S||A| N` at the first checkpoint whose agent-0 error
/// is at most `target`, or `None` if the record never gets there.
pub fn samples_to_target(record: &RunRecord, target: f64, num_state_actions: u64) -> Option<u64> {
    record
        .rows
        .iter()
        .find(|row| row.agent_error <= target)
        .map(|row| row.samples_per_agent * num_state_actions)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<TrendFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: (xs.len(), 1),
            found: (ys.len(), 1),
        });
    }
    if xs.len() < 2 {
        return Err(Error::param("xs", "a fit needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("xs", "all x values coincide"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(TrendFit {
        slope,
        intercept,
        r_squared,
    })
}

/// OLS on `(ln x, ln y)`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<TrendFit> {
    if let Some(bad) = xs.iter().chain(ys).find(|v| v.is_nan() || **v <= 0.0) {
        return Err(Error::param("loglog_fit", format!("inputs must be positive, got {bad}")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Exact per-agent communication and sample counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    pub rounds: u64,
    pub bits_per_agent: u64,
    /// Samples drawn per agent for each `(s, a)` pair (`N`).
    pub samples_per_agent_per_sa: u64,
}

impl CommLedger {
    /// `SC = |S||A| N`.
    pub fn sample_complexity(&self, num_state_actions: u64) -> u64 {
        self.samples_per_agent_per_sa * num_state_actions
    }

    pub fn absorb(&mut self, other: &CommLedger) {
        self.rounds += other.rounds;
        self.bits_per_agent += other.bits_per_agent;
        self.samples_per_agent_per_sa += other.samples_per_agent_per_sa;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsync::RunRow;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn record(errors: &[f64]) -> RunRecord {
        RunRecord {
            rows: errors
                .iter()
                .enumerate()
                .map(|(i, &e)| RunRow {
                    step: i as u64 + 1,
                    samples_per_agent: 10 * (i as u64 + 1),
                    agent_error: e,
                    averaged_error: e,
                    rounds: i as u64,
                    bits_per_agent: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn error_rate_basics() {
        let er = error_rate(&[0.1, 0.3]).unwrap();
        assert_abs_diff_eq!(er.mean, 0.2, epsilon = 1e-15);
        let er = error_rate(&[0.7; 5]).unwrap();
        assert_eq!(er.mean, 0.7);
        assert_eq!(er.stderr, 0.0);
        assert!(error_rate(&[]).is_err());
    }

    #[test]
    fn error_rate_of_uniform_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let er = error_rate(&xs).unwrap();
        assert!((er.mean - 0.5).abs() <= 4.0 * (1.0 / 12f64.sqrt()) / 20f64.sqrt());
    }

    #[test]
    fn samples_to_target_cases() {
        let rec = record(&[5.0, 3.0, 1.0, 0.5, 0.2]);
        assert_eq!(samples_to_target(&rec, 1.0, 6), Some(30 * 6));
        assert_eq!(samples_to_target(&rec, 0.1, 6), None);
        assert_eq!(samples_to_target(&rec, 10.0, 6), Some(10 * 6));
    }

    #[test]
    fn fits() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        let f = loglog_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(f.slope, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r_squared, 1.0, epsilon = 1e-12);
        let f = loglog_fit(&xs, &[2.0; 4]).unwrap();
        assert_abs_diff_eq!(f.slope, 0.0, epsilon = 1e-12);
        assert!(loglog_fit(&xs, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(loglog_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn noisy_quadratic_slope() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x * x * (1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0)))
            .collect();
        let f = loglog_fit(&xs, &ys).unwrap();
        assert!((1.9..=2.1).contains(&f.slope), "slope {}", f.slope);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    proptest! {
        #[test]
        fn samples_to_target_is_monotone(
            errors in prop::collection::vec(0.0f64..10.0, 1..20),
            t1 in 0.0f64..10.0,
            t2 in 0.0f64..10.0,
        ) {
            let rec = record(&errors);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            match (samples_to_target(&rec, lo, 6), samples_to_target(&rec, hi, 6)) {
                (Some(a), Some(b)) => prop_assert!(b <= a),
                (Some(_), None) => prop_assert!(false, "larger target unreached"),
                _ => {}
            }
        }

        #[test]
        fn loglog_slope_is_scale_invariant(
            ys in prop::collection::vec(0.01f64..100.0, 5),
            scale in 0.001f64..1000.0,
        ) {
            let xs = [1.0, 2.0, 3.0, 5.0, 8.0];
            let a = loglog_fit(&xs, &ys).unwrap();
            let scaled: Vec<f64> = ys.iter().map(|y| y * scale).collect();
            let b = loglog_fit(&xs, &scaled).unwrap();
            prop_assert!((a.slope - b.slope).abs() <= 1e-12);
        }
    }
}
