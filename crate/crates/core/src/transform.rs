//! Quantile-transform normalization to a standard-normal score scale.
//!
//! The transform stores `n_q` empirical quantiles of the fit data at evenly
//! spaced probability levels. `forward` finds the probability level of a value
//! by linear interpolation on those quantiles (ties get the mid-rank) and maps
//! it through Φ⁻¹; `inverse` runs the same path backwards. Ranks are clipped to
//! `[P_MIN, 1 - P_MIN]` so every finite input has a finite score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal;

/// Rank clip keeping Φ⁻¹ finite.
pub const P_MIN: f64 = 1e-7;
/// Scores at or beyond this magnitude map to the range endpoints.
pub const Z_GUARD: f64 = 8.0;
/// Default resolution cap.
pub const DEFAULT_N_QUANTILES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("need at least 2 values and 2 <= n_q <= {len}, got n_q = {n_q}")]
    TooFewValues { len: usize, n_q: usize },
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTransform {
    probe_points: Vec<f64>,
    reference_quantiles: Vec<f64>,
}

/// `n_q` for a sample of `n` values when none is configured.
pub fn default_n_quantiles(n: usize) -> usize {
    n.min(DEFAULT_N_QUANTILES)
}

/// Empirical quantile of sorted data at level `p`, interpolating linearly at
/// position `p (n-1)`.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl QuantileTransform {
    pub fn fit(values: &[f64], n_q: usize) -> Result<Self, TransformError> {
        if values.len() < 2 || n_q < 2 || n_q > values.len() {
            return Err(TransformError::TooFewValues {
                len: values.len(),
                n_q,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TransformError::NonFiniteValue(i));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let probe_points: Vec<f64> = (0..n_q).map(|i| i as f64 / (n_q - 1) as f64).collect();
        let mut reference_quantiles: Vec<f64> = probe_points
            .iter()
            .map(|&p| sorted_quantile(&sorted, p))
            .collect();
        // interpolation rounding must not break monotonicity
        for i in 1..n_q {
            if reference_quantiles[i] < reference_quantiles[i - 1] {
                reference_quantiles[i] = reference_quantiles[i - 1];
            }
        }
        Ok(Self {
            probe_points,
            reference_quantiles,
        })
    }

    /// Fits with the default resolution `min(1000, N)`.
    pub fn fit_default(values: &[f64]) -> Result<Self, TransformError> {
        Self::fit(values, default_n_quantiles(values.len()).max(2))
    }

    pub fn probe_points(&self) -> &[f64] {
        &self.probe_points
    }

    pub fn reference_quantiles(&self) -> &[f64] {
        &self.reference_quantiles
    }

    pub fn n_quantiles(&self) -> usize {
        self.reference_quantiles.len()
    }

    pub fn min(&self) -> f64 {
        self.reference_quantiles[0]
    }

    pub fn max(&self) -> f64 {
        self.reference_quantiles[self.reference_quantiles.len() - 1]
    }

    /// Unclipped rank of `x` in `[0, 1]`.
    pub fn rank(&self, x: f64) -> f64 {
        let q = &self.reference_quantiles;
        let p = &self.probe_points;
        let n = q.len();
        if x <= q[0] {
            // mid-rank over any run of quantiles equal to the minimum
            let hi = q.partition_point(|&v| v <= q[0]) - 1;
            return if x < q[0] { 0.0 } else { 0.5 * (p[0] + p[hi]) };
        }
        if x >= q[n - 1] {
            let lo = q.partition_point(|&v| v < q[n - 1]);
            return if x > q[n - 1] {
                1.0
            } else {
                0.5 * (p[lo] + p[n - 1])
            };
        }
        let lo = q.partition_point(|&v| v < x);
        let hi_excl = q.partition_point(|&v| v <= x);
        if hi_excl > lo {
            // x equals q[lo..hi_excl]
            return 0.5 * (p[lo] + p[hi_excl - 1]);
        }
        // q[lo-1] < x < q[lo]
        let (a, b) = (lo - 1, lo);
        let t = (x - q[a]) / (q[b] - q[a]);
        p[a] + t * (p[b] - p[a])
    }

    pub fn forward(&self, x: f64) -> f64 {
        let r = self.rank(x).clamp(P_MIN, 1.0 - P_MIN);
        normal::quantile(r)
    }

    pub fn inverse(&self, z: f64) -> f64 {
        if z >= Z_GUARD {
            return self.max();
        }
        if z <= -Z_GUARD {
            return self.min();
        }
        // forward clips ranks to [P_MIN, 1 - P_MIN]; the clipped scores
        // stand for the endpoints
        if z >= normal::quantile(1.0 - P_MIN) {
            return self.max();
        }
        if z <= normal::quantile(P_MIN) {
            return self.min();
        }
        let p = normal::cdf(z).clamp(0.0, 1.0);
        self.value_at(p)
    }

    /// Quantile value at probability `p` by interpolation on the probe grid.
    fn value_at(&self, p: f64) -> f64 {
        let q = &self.reference_quantiles;
        let pos = p * (q.len() - 1) as f64;
        let lo = (pos.floor() as usize).min(q.len() - 1);
        let hi = (lo + 1).min(q.len() - 1);
        let frac = pos - lo as f64;
        q[lo] + (q[hi] - q[lo]) * frac
    }

    /// Largest |score| `forward` can return.
    pub fn max_score() -> f64 {
        normal::quantile(1.0 - P_MIN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn grid() -> QuantileTransform {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        QuantileTransform::fit(&v, 1000).unwrap()
    }

    #[test]
    fn grid_quantiles_are_the_grid() {
        let t = grid();
        for (i, q) in t.reference_quantiles().iter().enumerate() {
            assert!((q - (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_data_maps_to_zero() {
        let t = QuantileTransform::fit(&[5.0; 4], 4).unwrap();
        assert!(t.reference_quantiles().iter().all(|&q| q == 5.0));
        // every probe level ties: mid-rank (0 + 1) / 2
        assert_eq!(t.rank(5.0), 0.5);
        assert_eq!(t.forward(5.0), 0.0);
        assert_eq!(t.inverse(1.3), 5.0);
    }

    #[test]
    fn too_few_values() {
        assert!(matches!(
            QuantileTransform::fit(&[1.0], 1),
            Err(TransformError::TooFewValues { .. })
        ));
        assert!(matches!(
            QuantileTransform::fit(&[1.0, 2.0], 3),
            Err(TransformError::TooFewValues { .. })
        ));
        assert_eq!(
            QuantileTransform::fit(&[1.0, f64::INFINITY], 2),
            Err(TransformError::NonFiniteValue(1))
        );
    }

    #[test]
    fn median_maps_to_zero() {
        let t = grid();
        assert!(t.forward(500.5).abs() < 1e-12);
        assert!((t.inverse(0.0) - 500.5).abs() < 1e-9);
    }

    #[test]
    fn clipping_at_extremes() {
        let t = grid();
        let floor = normal::quantile(P_MIN);
        assert_eq!(t.forward(-1e6), floor);
        assert_eq!(t.forward(0.5), floor);
        assert_eq!(t.forward(1e300), normal::quantile(1.0 - P_MIN));
        assert!(t.forward(1e300) <= QuantileTransform::max_score());
        assert_eq!(t.inverse(8.0), 1000.0);
        assert_eq!(t.inverse(50.0), 1000.0);
        assert_eq!(t.inverse(-9.0), 1.0);
    }

    #[test]
    fn upper_quartile_score() {
        let t = grid();
        // x = 750 sits at probe index 749 of 999
        let r = 749.0 / 999.0;
        assert!((t.rank(750.0) - r).abs() < 1e-12);
        let want = Normal::standard().inverse_cdf(r);
        assert!((t.forward(750.0) - want).abs() < 1e-8);
        assert!((t.forward(750.0) - 0.674).abs() < 1e-2);
    }

    #[test]
    fn round_trip_on_fit_data() {
        let data: Vec<f64> = (0..500).map(|i| ((i * 7919) % 997) as f64 * 0.37 + 3.0).collect();
        let t = QuantileTransform::fit_default(&data).unwrap();
        let range = t.max() - t.min();
        for &x in data.iter().take(100) {
            let back = t.inverse(t.forward(x));
            assert!((back - x).abs() <= 1e-6 * range, "x={x} back={back}");
        }
    }

    #[test]
    fn clipped_scores_return_the_endpoints() {
        // a lone low outlier makes the first quantile gap most of the range
        let mut data: Vec<f64> = (0..999).map(|i| 100.0 + i as f64 * 0.01).collect();
        data.push(-1e4);
        let t = QuantileTransform::fit(&data, 1000).unwrap();
        assert_eq!(t.inverse(t.forward(t.min())), t.min());
        assert_eq!(t.inverse(t.forward(t.max())), t.max());
    }

    #[test]
    fn one_outlier_moves_mid_ranks_by_at_most_one_step() {
        let data: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.61).sin() * 50.0 + i as f64 * 0.05).collect();
        let t0 = QuantileTransform::fit_default(&data).unwrap();
        let mut with_outlier = data.clone();
        with_outlier.push(1e9);
        let t1 = QuantileTransform::fit_default(&with_outlier).unwrap();
        let step = 1.0 / (t0.n_quantiles() - 1) as f64;
        let (lo, hi) = (t0.inverse(-1.0), t0.inverse(1.0));
        for i in 0..=100 {
            let x = lo + (hi - lo) * i as f64 / 100.0;
            assert!((t0.rank(x) - t1.rank(x)).abs() <= step, "x={x}");
        }
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![(-1e3f64..1e3), (-5i32..5).prop_map(f64::from)],
            2..200,
        )
    }

    proptest! {
        #[test]
        fn forward_is_monotone_and_bounded(data in sample(), a in -2e3f64..2e3, b in -2e3f64..2e3) {
            let t = QuantileTransform::fit_default(&data).unwrap();
            let (x1, x2) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.forward(x1) <= t.forward(x2));
            prop_assert!(t.forward(x1).abs() <= QuantileTransform::max_score());
        }

        #[test]
        fn round_trip_inside_the_fitted_range(data in sample(), u in prop::collection::vec(0f64..=1.0, 1..20)) {
            let t = QuantileTransform::fit_default(&data).unwrap();
            prop_assert!(t.reference_quantiles().windows(2).all(|w| w[0] <= w[1]));
            let range = t.max() - t.min();
            for x in u.iter().map(|u| t.min() + u * range).chain(data.iter().copied()) {
                let back = t.inverse(t.forward(x));
                prop_assert!((back - x).abs() <= 1e-6 * range.max(f64::MIN_POSITIVE), "x={} back={}", x, back);
            }
        }

        #[test]
        fn inverse_is_monotone(data in sample(), a in -9f64..9.0, b in -9f64..9.0) {
            let t = QuantileTransform::fit_default(&data).unwrap();
            let (z1, z2) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.inverse(z1) <= t.inverse(z2));
        }

        #[test]
        fn ranks_preserve_order(raw in prop::collection::vec(-4000i32..4000, 2..200)) {
            let data: Vec<f64> = raw.iter().map(|&v| f64::from(v) / 8.0).collect();
            let t = QuantileTransform::fit_default(&data).unwrap();
            let z: Vec<f64> = data.iter().map(|&x| t.forward(x)).collect();
            let mut by_raw: Vec<usize> = (0..data.len()).collect();
            by_raw.sort_by(|&i, &j| data[i].total_cmp(&data[j]));
            let mut by_z: Vec<usize> = (0..data.len()).collect();
            by_z.sort_by(|&i, &j| z[i].total_cmp(&z[j]));
            prop_assert_eq!(by_raw, by_z);
        }
    }
}
