//! A two-weight construction where a weight with near-total gradient
//! cancellation still widens the influence gap between a noisy and a clean
//! training sample.
//!
//! Weight θ has per-sample gradients `a1` (noisy) and `a2` (clean), weight ω
//! has `b1` and `b2`; the validation gradient is `(a3, b3)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::tracin_f64;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    /// `|b1 + b2|`.
    pub epsilon: f64,
    pub a3: f64,
    pub b3: f64,
    /// `|a3 (a1 - a2)|`: separation using θ alone.
    pub delta_theta: f64,
    /// `|a3 (a1 - a2) + b3 (b1 - b2)|`: separation using both weights.
    pub delta_theta_omega: f64,
    #[serde(with = "crate::floats")]
    pub cancellation_theta: f64,
    #[serde(with = "crate::floats")]
    pub cancellation_omega: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    let num = a.abs() + b.abs();
    let den = (a + b).abs();
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

impl CounterexampleReport {
    pub fn from_gradients(a1: f64, a2: f64, b1: f64, b2: f64, a3: f64, b3: f64) -> Result<Self> {
        if [a1, a2, b1, b2, a3, b3].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("counterexample gradients".into()));
        }
        Ok(CounterexampleReport {
            a1,
            a2,
            b1,
            b2,
            epsilon: (b1 + b2).abs(),
            a3,
            b3,
            delta_theta: (a3 * (a1 - a2)).abs(),
            delta_theta_omega: (a3 * (a1 - a2) + b3 * (b1 - b2)).abs(),
            cancellation_theta: ratio(a1, a2),
            cancellation_omega: ratio(b1, b2),
        })
    }
}

/// Random instance with `|b1 + b2| = epsilon` and `a3 b3 > 0`.
pub fn build_counterexample(epsilon: f64, seed: u64) -> Result<CounterexampleReport> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = seed::rng(seed, "counterexample");
    let flip = |rng: &mut rand_chacha::ChaCha8Rng| if rng.random_bool(0.5) { -1.0 } else { 1.0 };

    let a1: f64 = flip(&mut rng) * rng.random_range(0.5..1.5);
    let a2 = -a1 * rng.random_range(0.1..0.4);
    let gap = a1 - a2;
    // m shares the sign of a1 - a2 and dominates it, and |m| > epsilon keeps b1 b2 < 0.
    let magnitude = (gap.abs() * rng.random_range(2.0..10.0)).max(2.0 * epsilon);
    let m = gap.signum() * magnitude;
    let b1 = m;
    let b2 = -m + epsilon * m.signum();
    let s = flip(&mut rng);
    let a3 = s * rng.random_range(0.5..1.5);
    let b3 = s * rng.random_range(0.5..1.5);
    CounterexampleReport::from_gradients(a1, a2, b1, b2, a3, b3)
}

/// Recomputes both separations as TracIn differences on the stacked
/// (θ, ω) gradients and returns whether the joint one is strictly larger,
/// with the margin `Δθω - Δθ`.
pub fn verify_separation(report: &CounterexampleReport) -> Result<(bool, f64)> {
    let r = report;
    if [r.a1, r.a2, r.b1, r.b2, r.a3, r.b3].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("counterexample gradients".into()));
    }
    let theta = (tracin_f64(&[r.a3], &[r.a1])? - tracin_f64(&[r.a3], &[r.a2])?).abs();
    let val = [r.a3, r.b3];
    let joint = (tracin_f64(&val, &[r.a1, r.b1])? - tracin_f64(&val, &[r.a2, r.b2])?).abs();
    let margin = joint - theta;
    Ok((margin > 0.0, margin))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let r = CounterexampleReport::from_gradients(1.0, -0.5, 5.0, -4.999, 1.0, 1.0).unwrap();
        assert_eq!(r.delta_theta, 1.5);
        assert!((r.delta_theta_omega - 11.499).abs() < 1e-12);
        assert!((r.epsilon - 0.001).abs() < 1e-12);
        let (ok, margin) = verify_separation(&r).unwrap();
        assert!(ok);
        assert!((margin - 9.999).abs() < 1e-12);
    }

    #[test]
    fn zero_b3_adds_nothing() {
        let r = CounterexampleReport::from_gradients(1.0, -0.5, 5.0, -4.999, 1.0, 0.0).unwrap();
        assert_eq!(r.delta_theta_omega, r.delta_theta);
        assert!(!verify_separation(&r).unwrap().0);
    }

    #[test]
    fn shrinking_epsilon_only_moves_the_cancellation() {
        let gap = 10.0;
        let make = |eps: f64| {
            CounterexampleReport::from_gradients(1.0, -0.5, (gap + eps) / 2.0, (eps - gap) / 2.0, 1.0, 1.0).unwrap()
        };
        let (wide, narrow) = (make(1e-2), make(1e-3));
        assert!((wide.delta_theta_omega - narrow.delta_theta_omega).abs() < 1e-12);
        assert!((narrow.cancellation_omega / wide.cancellation_omega - 10.0).abs() < 1e-9);
    }

    #[test]
    fn anti_aligned_validation_gradient_can_lose() {
        // b3 (b1 - b2) nearly undoes a3 (a1 - a2)
        let r = CounterexampleReport::from_gradients(1.0, -0.5, 5.0, -4.999, 1.0, -0.15).unwrap();
        assert!(r.a3 * r.b3 < 0.0);
        assert!(!verify_separation(&r).unwrap().0);
    }

    #[test]
    fn equal_theta_gradients() {
        let r = CounterexampleReport::from_gradients(0.7, 0.7, 3.0, -2.9, 1.0, 0.2).unwrap();
        assert_eq!(r.delta_theta, 0.0);
        assert!(verify_separation(&r).unwrap().0);
    }

    #[test]
    fn built_instances_satisfy_invariants() {
        for eps in [1e-2, 1e-4, 1e-6, 3.0] {
            for seed in 0..50 {
                let r = build_counterexample(eps, seed).unwrap();
                assert!(r.a1 * r.a2 < 0.0 && r.b1 * r.b2 < 0.0);
                assert!(r.a3 * r.b3 > 0.0);
                assert!((r.epsilon - eps).abs() <= eps * 1e-6);
                assert!(verify_separation(&r).unwrap().0);
            }
        }
    }

    #[test]
    fn scaling_the_validation_gradient() {
        let r = build_counterexample(1e-3, 4).unwrap();
        let s = CounterexampleReport::from_gradients(r.a1, r.a2, r.b1, r.b2, -3.0 * r.a3, -3.0 * r.b3).unwrap();
        let (_, m1) = verify_separation(&r).unwrap();
        let (_, m2) = verify_separation(&s).unwrap();
        assert!((m2 - 3.0 * m1).abs() < 1e-9 * m2.abs());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_counterexample(0.0, 1).is_err());
        assert!(CounterexampleReport::from_gradients(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }
}
