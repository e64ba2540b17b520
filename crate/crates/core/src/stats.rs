//! Empirical distribution and error statistics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("quantile level {0} outside [0, 1]")]
    QOutOfRange(f64),
    #[error("length mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite value in sample")]
    NonFinite,
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Empirical CDF of a finite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::EmptySample);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(Self {
            sorted: sorted_copy(values),
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    /// Count of sample points `<= t`.
    pub fn count_le(&self, t: f64) -> usize {
        self.sorted.partition_point(|&v| v <= t)
    }

    /// `F(t) = #{x_i <= t} / n`.
    pub fn eval(&self, t: f64) -> f64 {
        self.count_le(t) as f64 / self.len() as f64
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_t |F_a(t) - F_b(t)|`.
///
/// Both samples are sorted and walked in one merge; at each distinct value
/// every point equal to it is consumed on both sides before the ECDF gap is
/// taken, so ties are evaluated at the right-continuous value.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let sa = sorted_copy(a);
    let sb = sorted_copy(b);
    Ok(ks_sorted(&sa, &sb))
}

/// KS statistic of two already sorted, finite, non-empty samples.
pub fn ks_sorted(sa: &[f64], sb: &[f64]) -> f64 {
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    // track the gap as the exact integer |i m - j n| and divide once
    let mut gap = 0usize;
    while i < sa.len() && j < sb.len() {
        let t = match sa[i].partial_cmp(&sb[j]) {
            Some(Ordering::Greater) => sb[j],
            _ => sa[i],
        };
        while i < sa.len() && sa[i] <= t {
            i += 1;
        }
        while j < sb.len() && sb[j] <= t {
            j += 1;
        }
        gap = gap.max((i * m).abs_diff(j * n));
    }
    // once one side is exhausted its ECDF is 1 and the gap only shrinks
    gap as f64 / (n * m) as f64
}

/// Linear-interpolation quantile at position `q (n-1)` of the sorted sample.
pub fn quantile(values: &[f64], q: f64) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(StatsError::QOutOfRange(q));
    }
    Ok(quantile_sorted(&sorted_copy(values), q))
}

/// `quantile` on an already sorted sample; `q` must be in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<(), StatsError> {
    if y.len() != yhat.len() {
        return Err(StatsError::DimensionMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(StatsError::EmptySample);
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, StatsError> {
    check_pair(y, yhat)?;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Error percentile levels reported alongside RMSE.
pub const ERROR_PERCENTILES: [u32; 3] = [90, 95, 98];

/// Percentiles of `|y - yhat|`, keyed by integer level.
pub fn abs_error_percentiles(
    y: &[f64],
    yhat: &[f64],
    levels: &[u32],
) -> Result<BTreeMap<u32, f64>, StatsError> {
    check_pair(y, yhat)?;
    let mut abs: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).collect();
    abs.sort_by(f64::total_cmp);
    levels
        .iter()
        .map(|&l| {
            let q = f64::from(l) / 100.0;
            if q > 1.0 {
                return Err(StatsError::QOutOfRange(q));
            }
            Ok((l, quantile_sorted(&abs, q)))
        })
        .collect()
}

/// Rectangle-rule running integral `c_k = dt * sum_{j<=k} v_j`.
pub fn cumulative_series(values: &[f64], dt: f64) -> Result<Vec<f64>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut acc = 0.0;
    Ok(values
        .iter()
        .map(|v| {
            acc += v;
            acc * dt
        })
        .collect())
}

/// Fraction of observations inside `[lo, hi]`.
pub fn coverage(y: &[f64], lo: &[f64], hi: &[f64]) -> Result<f64, StatsError> {
    check_pair(y, lo)?;
    check_pair(y, hi)?;
    let inside = y
        .iter()
        .zip(lo.iter().zip(hi))
        .filter(|(v, (l, h))| **l <= **v && **v <= **h)
        .count();
    Ok(inside as f64 / y.len() as f64)
}

/// RMSE and absolute-error percentiles for one prediction series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub rmse: f64,
    pub p90: f64,
    pub p95: f64,
    pub p98: f64,
}

impl ErrorSummary {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self, StatsError> {
        let p = abs_error_percentiles(y, yhat, &ERROR_PERCENTILES)?;
        Ok(Self {
            rmse: rmse(y, yhat)?,
            p90: p[&90],
            p95: p[&95],
            p98: p[&98],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n·m) oracle: evaluate both ECDFs at every pooled point.
    fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
        // both ECDFs at every sample point, compared over the common
        // denominator n m so the result is a single correctly rounded ratio
        let (n, m) = (a.len(), b.len());
        let gap = a
            .iter()
            .chain(b)
            .map(|&t| {
                let ca = a.iter().filter(|&&x| x <= t).count();
                let cb = b.iter().filter(|&&x| x <= t).count();
                (ca * m).abs_diff(cb * n)
            })
            .max()
            .unwrap_or(0);
        gap as f64 / (n * m) as f64
    }

    #[test]
    fn ks_examples() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 3.0, 4.0];
        assert_eq!(ks_brute(&a, &b), 1.0 / 3.0);
        assert_eq!(ks_statistic(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[-3.0, -1.0], &[1.5, 2.0, 9.0]).unwrap(), 1.0);
        assert_eq!(ks_statistic(&[], &a), Err(StatsError::EmptySample));
        assert_eq!(ks_statistic(&a, &[f64::NAN]), Err(StatsError::NonFinite));
    }

    #[test]
    fn ks_all_tied() {
        assert_eq!(ks_statistic(&[2.0; 5], &[2.0; 3]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0, 2.0], &[2.0]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn ecdf_steps() {
        let e = Ecdf::new(&[3.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(e.eval(f64::NEG_INFINITY), 0.0);
        assert_eq!(e.eval(0.99), 0.0);
        assert_eq!(e.eval(1.0), 0.25);
        assert_eq!(e.eval(2.0), 0.75);
        assert_eq!(e.eval(3.0), 1.0);
        assert!(Ecdf::new(&[]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let v = [10.0, 20.0, 30.0, 40.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 10.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 40.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 25.0);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((quantile(&ten, 0.9).unwrap() - 9.1).abs() < 1e-12);
        assert_eq!(quantile(&[], 0.5), Err(StatsError::EmptySample));
        assert_eq!(quantile(&v, 1.5), Err(StatsError::QOutOfRange(1.5)));
        assert_eq!(quantile(&[7.0], 0.3).unwrap(), 7.0);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - (12.5f64).sqrt()).abs() < 1e-15);
        assert!((rmse(&[1.0, 5.0, 9.0], &[3.5, 7.5, 11.5]).unwrap() - 2.5).abs() < 1e-15);
        assert_eq!(rmse(&[1.0], &[]), Err(StatsError::DimensionMismatch(1, 0)));
        assert_eq!(rmse(&[], &[]), Err(StatsError::EmptySample));
    }

    #[test]
    fn percentile_examples() {
        let y: Vec<f64> = (1..=10).map(f64::from).collect();
        let zero = vec![0.0; 10];
        let p = abs_error_percentiles(&y, &zero, &ERROR_PERCENTILES).unwrap();
        assert!((p[&90] - 9.1).abs() < 1e-12);
        let p = abs_error_percentiles(&y, &y, &ERROR_PERCENTILES).unwrap();
        assert!(p.values().all(|&v| v == 0.0));
        let p = abs_error_percentiles(&[3.0], &[5.5], &ERROR_PERCENTILES).unwrap();
        assert!(p.values().all(|&v| v == 2.5));
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_series(&[0.0; 4], 1.0).unwrap(), vec![0.0; 4]);
        assert_eq!(cumulative_series(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![1.0, 3.0, 6.0]);
        assert_eq!(cumulative_series(&[1.0, 2.0, 3.0], 2.0).unwrap(), vec![2.0, 6.0, 12.0]);
        assert_eq!(cumulative_series(&[], 1.0), Err(StatsError::EmptySample));
    }

    #[test]
    fn coverage_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(coverage(&y, &y, &y).unwrap(), 1.0);
        let inf = [f64::INFINITY; 4];
        let ninf = [f64::NEG_INFINITY; 4];
        assert_eq!(coverage(&y, &ninf, &inf).unwrap(), 1.0);
        assert_eq!(coverage(&y, &[1.5; 4], &[3.0; 4]).unwrap(), 0.5);
    }

    fn tied_sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..12).prop_map(|v| f64::from(v) * 0.5), 1..=50)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn ks_merge_equals_brute_force(a in tied_sample(), b in tied_sample()) {
            prop_assert_eq!(ks_statistic(&a, &b).unwrap().to_bits(), ks_brute(&a, &b).to_bits());
        }

        #[test]
        fn ks_symmetric_and_bounded(
            a in prop::collection::vec(-100f64..100.0, 1..40),
            b in prop::collection::vec(-100f64..100.0, 1..40),
        ) {
            let ab = ks_statistic(&a, &b).unwrap();
            prop_assert_eq!(ab, ks_statistic(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn ks_detects_translation(a in prop::collection::btree_set(-1000i32..1000, 1..40), c in 1i32..50) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let shifted: Vec<f64> = a.iter().map(|v| v + f64::from(c) + 0.5).collect();
            prop_assert!(ks_statistic(&a, &shifted).unwrap() > 0.0);
        }

        #[test]
        fn quantile_monotone_and_permutation_invariant(
            mut v in prop::collection::vec(-1e3f64..1e3, 1..60),
            q1 in 0f64..=1.0,
            q2 in 0f64..=1.0,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(quantile(&v, lo).unwrap() <= quantile(&v, hi).unwrap());
            let before = quantile(&v, q1).unwrap();
            v.reverse();
            prop_assert_eq!(before, quantile(&v, q1).unwrap());
        }

        #[test]
        fn ecdf_is_a_right_continuous_step(v in prop::collection::vec(-50i32..50, 1..60), t in -60i32..60) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let e = Ecdf::new(&v).unwrap();
            let t = f64::from(t);
            prop_assert_eq!(e.eval(f64::NEG_INFINITY), 0.0);
            prop_assert_eq!(e.eval(e.sorted_values()[e.len() - 1]), 1.0);
            let f = e.eval(t);
            prop_assert!((0.0..=1.0).contains(&f));
            // constant just to the right of t, and only moves at sample points
            prop_assert_eq!(e.eval(t + 1e-9), f);
            if !v.contains(&t) {
                prop_assert_eq!(e.eval(t - 1e-9), f);
            }
        }

        #[test]
        fn cumulative_non_decreasing(v in prop::collection::vec(0f64..1e3, 1..100)) {
            let c = cumulative_series(&v, 1.0).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
