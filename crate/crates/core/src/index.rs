//! AoI dynamics, the geometric AoI cost, its closed-form Whittle index, and
//! the value function, average cost and stationary law of threshold policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Next AoI: 1 after a delivered update, otherwise one older.
pub fn aoi_step(delta: u32, delivered: bool) -> u32 {
    if delivered {
        1
    } else {
        delta.saturating_add(1)
    }
}

/// `alpha^d`, computed on the log scale for large exponents.
pub fn alpha_pow(alpha: f64, d: u32) -> f64 {
    if d > 200 {
        (d as f64 * alpha.ln()).exp()
    } else {
        alpha.powi(d as i32)
    }
}

/// Scalar AoI cost `f(d) = beta * alpha^d` of one sensor with channel
/// success probability `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoiFunction {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
}

/// Transmit iff the AoI is at or above `delta_th`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub delta_th: u32,
}

impl ThresholdPolicy {
    pub fn new(delta_th: u32) -> Result<Self> {
        if delta_th == 0 {
            return Err(Error::Domain("threshold must be at least 1".into()));
        }
        Ok(Self { delta_th })
    }

    pub fn transmits(&self, delta: u32) -> bool {
        delta >= self.delta_th
    }
}

impl AoiFunction {
    pub fn new(alpha: f64, beta: f64, p: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha {alpha} must be finite and exceed 1")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("beta {beta} must be positive")));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("success probability {p} not in (0, 1]")));
        }
        Ok(Self { alpha, beta, p })
    }

    /// `1 - alpha + alpha p`, positive exactly when `alpha (1 - p) < 1`.
    pub fn drift_margin(&self) -> f64 {
        1.0 - self.alpha + self.alpha * self.p
    }

    pub fn check_stable(&self) -> Result<()> {
        let product = self.alpha * (1.0 - self.p);
        if product < 1.0 {
            Ok(())
        } else {
            Err(Error::Unstable { product })
        }
    }

    pub fn value(&self, delta: u32) -> f64 {
        self.beta * alpha_pow(self.alpha, delta)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { beta: self.beta * c, ..*self }
    }

    /// Closed-form Whittle index at AoI `delta`. Positive and strictly
    /// increasing in `delta` whenever `alpha (1 - p) < 1`.
    pub fn whittle_index(&self, delta: u32) -> Result<f64> {
        self.check_stable()?;
        let Self { alpha: a, beta: b, p } = *self;
        let d = delta as f64;
        let bracket = p * d / self.drift_margin() - 1.0 / (a - 1.0);
        Ok(b * p * alpha_pow(a, delta + 1) * bracket + b * p * a / (a - 1.0))
    }

    /// Long-run average of `f(d) + w * u` under the threshold policy.
    pub fn threshold_average_cost(&self, tp: ThresholdPolicy, w: f64) -> Result<f64> {
        self.check_stable()?;
        let Self { alpha: a, beta: b, p } = *self;
        let th = tp.delta_th;
        let at = alpha_pow(a, th);
        let num = w + p * b * (at - a) / (a - 1.0) + p * b * at / self.drift_margin();
        Ok(num / (1.0 + p * th as f64 - p))
    }

    /// Relative value of AoI `delta` under the threshold policy with
    /// multiplier `w`, normalized so that `V(1) = 0`.
    pub fn threshold_value_function(&self, tp: ThresholdPolicy, w: f64, delta: u32) -> Result<f64> {
        if delta == 0 {
            return Err(Error::Domain("AoI must be at least 1".into()));
        }
        let theta = self.threshold_average_cost(tp, w)?;
        let Self { alpha: a, beta: b, p } = *self;
        let th = tp.delta_th;
        let upper = |d: u32| b * alpha_pow(a, d) / self.drift_margin() + (w - theta) / p;
        if delta >= th {
            Ok(upper(delta))
        } else {
            let v_res = upper(th) - th as f64 * theta;
            Ok(b * (alpha_pow(a, th) - alpha_pow(a, delta)) / (a - 1.0) + delta as f64 * theta + v_res)
        }
    }
}

/// Stationary AoI law of a threshold policy, truncated at a cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryAoi {
    /// `mass[k]` is the probability of AoI `k + 1`.
    pub mass: Vec<f64>,
    /// Probability of any AoI beyond the cap.
    pub tail: f64,
}

impl StationaryAoi {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum::<f64>() + self.tail
    }

    /// `(delta, mass)` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,mass\n");
        for (k, m) in self.mass.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, m));
        }
        out
    }
}

fn renewal_length(p: f64, tp: ThresholdPolicy) -> f64 {
    tp.delta_th as f64 * p + 1.0 - p
}

pub fn stationary_aoi_distribution(p: f64, tp: ThresholdPolicy, delta_cap: u32) -> Result<StationaryAoi> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("success probability {p} not in (0, 1]")));
    }
    if delta_cap < tp.delta_th {
        return Err(Error::Domain(format!("cap {delta_cap} is below the threshold {}", tp.delta_th)));
    }
    let d = renewal_length(p, tp);
    let mass = (1..=delta_cap)
        .map(|k| if k < tp.delta_th { p / d } else { p * (1.0 - p).powi((k - tp.delta_th) as i32) / d })
        .collect();
    let tail = (1.0 - p).powi((delta_cap + 1 - tp.delta_th) as i32) / d;
    Ok(StationaryAoi { mass, tail })
}

/// Long-run fraction of steps in which the threshold policy transmits.
pub fn threshold_transmission_rate(p: f64, tp: ThresholdPolicy) -> f64 {
    1.0 / renewal_length(p, tp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn f(alpha: f64, beta: f64, p: f64) -> AoiFunction {
        AoiFunction::new(alpha, beta, p).unwrap()
    }

    #[test]
    fn aoi_recursion() {
        assert_eq!(aoi_step(5, true), 1);
        assert_eq!(aoi_step(5, false), 6);
        assert_eq!(aoi_step(1, true), 1);
    }

    #[test]
    fn cost_values() {
        assert_relative_eq!(f(2.0, 3.0, 1.0).value(2), 12.0);
        assert_relative_eq!(f(1.44, 1.0, 1.0).value(1), 1.44);
        let g = f(1.3, 0.7, 0.8);
        assert_relative_eq!(g.value(8) / g.value(7), 1.3, max_relative = 1e-12);
        assert_relative_eq!(alpha_pow(1.01, 250), 1.01f64.powi(250), max_relative = 1e-12);
    }

    #[test]
    fn whittle_index_hand_values() {
        assert_relative_eq!(f(2.0, 1.0, 1.0).whittle_index(1).unwrap(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(f(1.5, 2.0, 0.5).whittle_index(1).unwrap(), 3.0, max_relative = 1e-12);
        assert_relative_eq!(f(1.5, 2.0, 0.5).whittle_index(2).unwrap(), 9.75, max_relative = 1e-12);
    }

    #[test]
    fn unstable_parameters_are_refused() {
        let g = f(2.5, 1.0, 0.5);
        assert!(matches!(g.whittle_index(1), Err(Error::Unstable { .. })));
        assert!(g.threshold_average_cost(ThresholdPolicy { delta_th: 1 }, 0.0).is_err());
    }

    #[test]
    fn average_cost_hand_value() {
        let theta = f(2.0, 1.0, 1.0).threshold_average_cost(ThresholdPolicy { delta_th: 1 }, 0.0).unwrap();
        assert_relative_eq!(theta, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn distribution_hand_values() {
        let s = stationary_aoi_distribution(1.0, ThresholdPolicy { delta_th: 1 }, 4).unwrap();
        assert_eq!(s.mass, vec![1.0, 0.0, 0.0, 0.0]);
        let s = stationary_aoi_distribution(0.5, ThresholdPolicy { delta_th: 2 }, 4).unwrap();
        let want = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 12.0];
        for (got, want) in s.mass.iter().zip(want) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        assert_relative_eq!(s.tail, 1.0 / 12.0, max_relative = 1e-12);
        assert!(stationary_aoi_distribution(0.5, ThresholdPolicy { delta_th: 5 }, 4).is_err());
        assert!(s.to_csv().starts_with("delta,mass\n1,"));
    }

    #[test]
    fn rate_hand_values() {
        assert_relative_eq!(threshold_transmission_rate(1.0, ThresholdPolicy { delta_th: 1 }), 1.0);
        assert_relative_eq!(
            threshold_transmission_rate(0.5, ThresholdPolicy { delta_th: 2 }),
            2.0 / 3.0,
            max_relative = 1e-12
        );
    }

    /// Sums `Psi(d) f(d)` directly until the geometric tail is negligible.
    fn stationary_cost_oracle(g: &AoiFunction, th: u32) -> f64 {
        let d = th as f64 * g.p + 1.0 - g.p;
        let mut total = 0.0;
        for k in 1u32..200_000 {
            let psi = if k < th { g.p / d } else { g.p * (1.0 - g.p).powi((k - th) as i32) / d };
            let term = psi * g.value(k);
            total += term;
            if k > th && term < 1e-18 * total {
                break;
            }
        }
        total
    }

    fn valid_params() -> impl Strategy<Value = AoiFunction> {
        (1.01f64..2.0, 0.1f64..5.0, 0.0f64..1.0).prop_map(|(alpha, beta, u)| {
            // Keep alpha (1 - p) comfortably below 1.
            let p_min = (1.0 - 0.95 / alpha).max(0.05);
            f(alpha, beta, p_min + u * (1.0 - p_min))
        })
    }

    proptest! {
        #[test]
        fn index_is_increasing(g in valid_params()) {
            let mut prev = g.whittle_index(1).unwrap();
            for d in 2..=30 {
                let next = g.whittle_index(d).unwrap();
                prop_assert!(next > prev);
                prev = next;
            }
        }

        #[test]
        fn index_at_one_is_positive(g in valid_params()) {
            let w1 = g.whittle_index(1).unwrap();
            let simplified = g.beta * g.p * g.alpha * (g.alpha - 1.0) / g.drift_margin();
            prop_assert!(w1 > 0.0);
            prop_assert!((w1 - simplified).abs() <= 1e-9 * simplified);
        }

        #[test]
        fn index_is_linear_in_beta(g in valid_params(), c in 0.01f64..100.0, d in 1u32..30) {
            let base = g.whittle_index(d).unwrap();
            let scaled = g.scaled(c).whittle_index(d).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-9 * (c * base).abs().max(1e-12));
        }

        #[test]
        fn average_cost_matches_stationary_sum(g in valid_params(), th in 1u32..12, w in -5.0f64..50.0) {
            let tp = ThresholdPolicy { delta_th: th };
            let theta = g.threshold_average_cost(tp, w).unwrap();
            let oracle = stationary_cost_oracle(&g, th) + w * threshold_transmission_rate(g.p, tp);
            prop_assert!((theta - oracle).abs() <= 1e-8 * oracle.abs().max(1.0), "{theta} vs {oracle}");
        }

        #[test]
        fn tie_at_the_index(g in valid_params(), d in 1u32..15) {
            let w = g.whittle_index(d).unwrap();
            let a = g.threshold_average_cost(ThresholdPolicy { delta_th: d }, w).unwrap();
            let b = g.threshold_average_cost(ThresholdPolicy { delta_th: d + 1 }, w).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12));
        }

        #[test]
        fn value_function_solves_bellman(g in valid_params(), th in 1u32..10) {
            // A multiplier strictly inside the band where this threshold is optimal.
            let hi = g.whittle_index(th).unwrap();
            let lo = if th > 1 { g.whittle_index(th - 1).unwrap() } else { hi - 1.0 };
            let w = 0.5 * (lo + hi);
            let tp = ThresholdPolicy { delta_th: th };
            let theta = g.threshold_average_cost(tp, w).unwrap();
            let v = |d| g.threshold_value_function(tp, w, d).unwrap();
            prop_assert!(v(1).abs() < 1e-9 * g.value(th).max(1.0));
            for d in 1..=50 {
                let idle = v(d + 1);
                let send = w + g.p * v(1) + (1.0 - g.p) * v(d + 1);
                let rhs = g.value(d) + idle.min(send) - theta;
                let scale = v(d).abs().max(g.value(d)).max(1.0);
                prop_assert!((v(d) - rhs).abs() <= 1e-8 * scale, "d={d}: {} vs {}", v(d), rhs);
                prop_assert!(v(d + 1) > v(d));
            }
        }

        #[test]
        fn distribution_normalizes(p in 0.01f64..=1.0, th in 1u32..40, extra in 0u32..100) {
            let tp = ThresholdPolicy { delta_th: th };
            let s = stationary_aoi_distribution(p, tp, th + extra).unwrap();
            prop_assert!((s.total() - 1.0).abs() < 1e-10);
        }
    }
}
