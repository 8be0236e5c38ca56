//! Noise schedules, forward diffusion, and predictor conversions.
//!
//! A schedule fixes the interpolation `x_t = alpha(t) * x0 + sigma(t) * eps`
//! between clean data at `t = 0` and pure noise at `t = 1`. Everything else —
//! velocity targets, score/data predictor conversions, SDE drift and
//! diffusion coefficients — is algebra over `alpha`, `sigma` and their time
//! derivatives, so the functions here are generic over the schedule even
//! though rectified flow is the only instance the lab ships.

use crate::error::{Error, Result};

/// Clamp margin for times passed into singular conversions.
pub const T_MIN: f64 = 1e-4;

/// Clamp `t` into `[T_MIN, 1 - T_MIN]`.
pub fn clamp_time(t: f64) -> f64 {
    t.clamp(T_MIN, 1.0 - T_MIN)
}

/// A noise schedule: `alpha`, `sigma`, and their time derivatives on `[0, 1]`.
///
/// Required invariants: `sigma(t) > 0` on `(0, 1]`, `alpha(t) > 0` on
/// `[0, 1)`, and `alpha * sigma_dot - alpha_dot * sigma > 0` (strictly
/// decreasing signal-to-noise ratio).
pub trait NoiseSchedule {
    fn alpha(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> f64;
    fn alpha_dot(&self, t: f64) -> f64;
    fn sigma_dot(&self, t: f64) -> f64;

    /// Schedule tag used in configs and checkpoints.
    fn id(&self) -> &'static str;

    /// Half log signal-to-noise ratio `log(alpha / sigma)`.
    ///
    /// Returns `+inf` where `sigma = 0` and `-inf` where `alpha = 0`.
    fn log_snr(&self, t: f64) -> f64 {
        let (a, s) = (self.alpha(t), self.sigma(t));
        if s == 0.0 {
            return f64::INFINITY;
        }
        if a == 0.0 {
            return f64::NEG_INFINITY;
        }
        (a / s).ln()
    }

    /// Inverse of [`NoiseSchedule::log_snr`] by bisection.
    ///
    /// `log_snr` is strictly decreasing, so bisection on `(0, 1)` converges;
    /// concrete schedules may override with a closed form.
    fn time_from_log_snr(&self, lambda: f64) -> f64 {
        let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.log_snr(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Rectified flow: `alpha = 1 - t`, `sigma = t`. Straight-line interpolants,
/// velocity target `eps - x0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RectifiedFlow;

impl NoiseSchedule for RectifiedFlow {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn sigma(&self, t: f64) -> f64 {
        t
    }
    fn alpha_dot(&self, _t: f64) -> f64 {
        -1.0
    }
    fn sigma_dot(&self, _t: f64) -> f64 {
        1.0
    }
    fn id(&self) -> &'static str {
        "rectified_flow"
    }
    fn log_snr(&self, t: f64) -> f64 {
        if t == 0.0 {
            return f64::INFINITY;
        }
        if t == 1.0 {
            return f64::NEG_INFINITY;
        }
        ((1.0 - t) / t).ln()
    }
    fn time_from_log_snr(&self, lambda: f64) -> f64 {
        // lambda = ln((1-t)/t)  =>  t = 1/(1 + e^lambda)
        1.0 / (1.0 + lambda.exp())
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Signal/noise determinant `alpha * sigma_dot - alpha_dot * sigma`.
///
/// Positive for any schedule with decreasing SNR; identically 1 for
/// rectified flow.
pub fn snr_determinant<S: NoiseSchedule + ?Sized>(sched: &S, t: f64) -> f64 {
    sched.alpha(t) * sched.sigma_dot(t) - sched.alpha_dot(t) * sched.sigma(t)
}

/// Forward diffusion: returns `(x_t, v_target)` with
/// `x_t = alpha * x0 + sigma * eps` and `v = alpha_dot * x0 + sigma_dot * eps`.
pub fn forward_diffuse<S: NoiseSchedule + ?Sized>(
    sched: &S,
    x0: &[f64],
    eps: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(x0, eps)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParam(format!("t = {t} outside [0, 1]")));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let (ad, sd) = (sched.alpha_dot(t), sched.sigma_dot(t));
    let x_t = x0
        .iter()
        .zip(eps)
        .map(|(x, e)| a * x + s * e)
        .collect();
    let v = x0
        .iter()
        .zip(eps)
        .map(|(x, e)| ad * x + sd * e)
        .collect();
    Ok((x_t, v))
}

/// Convert a velocity prediction at `(x_t, t)` into a score prediction.
///
/// Solves the linear system `{x_t = alpha x0 + sigma eps, v = alpha_dot x0 +
/// sigma_dot eps}` for `eps` and returns `score = -eps / sigma`. Singular at
/// `t = 0` where `sigma` vanishes.
pub fn velocity_to_score<S: NoiseSchedule + ?Sized>(
    sched: &S,
    x_t: &[f64],
    v: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(x_t, v)?;
    let s = sched.sigma(t);
    if s <= 0.0 {
        return Err(Error::Singularity {
            t,
            what: "sigma vanishes; score undefined",
        });
    }
    let (a, ad) = (sched.alpha(t), sched.alpha_dot(t));
    let det = snr_determinant(sched, t);
    // eps = (alpha v - alpha_dot x_t) / det; score = -eps / sigma.
    Ok(x_t
        .iter()
        .zip(v)
        .map(|(x, vi)| (ad * x - a * vi) / (det * s))
        .collect())
}

/// Inverse of [`velocity_to_score`]. Needs `alpha > 0`, i.e. `t < 1`.
pub fn score_to_velocity<S: NoiseSchedule + ?Sized>(
    sched: &S,
    x_t: &[f64],
    score: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(x_t, score)?;
    let a = sched.alpha(t);
    if a <= 0.0 {
        return Err(Error::Singularity {
            t,
            what: "alpha vanishes; x0 not recoverable from score",
        });
    }
    let s = sched.sigma(t);
    let ad = sched.alpha_dot(t);
    let det = snr_determinant(sched, t);
    // v = (alpha_dot / alpha) x_t - (sigma det / alpha) score
    Ok(x_t
        .iter()
        .zip(score)
        .map(|(x, sc)| (ad / a) * x - (s * det / a) * sc)
        .collect())
}

/// Data prediction from a velocity prediction:
/// `x0 = (sigma_dot x_t - sigma v) / det`. Reduces to `x_t - t v` under
/// rectified flow.
pub fn velocity_to_x0<S: NoiseSchedule + ?Sized>(
    sched: &S,
    x_t: &[f64],
    v: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(x_t, v)?;
    let s = sched.sigma(t);
    let sd = sched.sigma_dot(t);
    let det = snr_determinant(sched, t);
    Ok(x_t
        .iter()
        .zip(v)
        .map(|(x, vi)| (sd * x - s * vi) / det)
        .collect())
}

/// Velocity implied by a data prediction at `(x_t, t)`. Needs `sigma > 0`.
pub fn x0_to_velocity<S: NoiseSchedule + ?Sized>(
    sched: &S,
    x_t: &[f64],
    x0: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(x_t, x0)?;
    let s = sched.sigma(t);
    if s <= 0.0 {
        return Err(Error::Singularity {
            t,
            what: "sigma vanishes; eps not recoverable from x0",
        });
    }
    let (a, ad, sd) = (sched.alpha(t), sched.alpha_dot(t), sched.sigma_dot(t));
    Ok(x_t
        .iter()
        .zip(x0)
        .map(|(x, x0i)| {
            let eps = (x - a * x0i) / s;
            ad * x0i + sd * eps
        })
        .collect())
}

/// Forward-SDE coefficients `(f, g^2)` with `f = d log alpha / dt` and
/// `g^2 = d sigma^2 / dt - 2 f sigma^2`. For rectified flow:
/// `f = -1/(1-t)`, `g^2 = 2t/(1-t)`. Singular at `t = 1`.
pub fn drift_and_diffusion<S: NoiseSchedule + ?Sized>(sched: &S, t: f64) -> Result<(f64, f64)> {
    let a = sched.alpha(t);
    if a <= 0.0 {
        return Err(Error::Singularity {
            t,
            what: "alpha vanishes; drift coefficient diverges",
        });
    }
    let f = sched.alpha_dot(t) / a;
    let s = sched.sigma(t);
    let g2 = 2.0 * s * sched.sigma_dot(t) - 2.0 * f * s * s;
    Ok((f, g2))
}

#[cfg(test)]
mod tests {
    use super::*;

    const RF: RectifiedFlow = RectifiedFlow;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rectified_flow_boundary_values() {
        assert_eq!(RF.alpha(0.0), 1.0);
        assert_eq!(RF.sigma(0.0), 0.0);
        assert_eq!(RF.alpha(1.0), 0.0);
        assert_eq!(RF.sigma(1.0), 1.0);
        assert_eq!(RF.alpha_dot(0.3), -1.0);
        assert_eq!(RF.sigma_dot(0.7), 1.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let h = 1e-5;
        for &t in &[0.1, 0.25, 0.5, 0.77, 0.9] {
            let fd_a = (RF.alpha(t + h) - RF.alpha(t - h)) / (2.0 * h);
            let fd_s = (RF.sigma(t + h) - RF.sigma(t - h)) / (2.0 * h);
            assert!((RF.alpha_dot(t) - fd_a).abs() <= 1e-6, "alpha_dot at {t}");
            assert!((RF.sigma_dot(t) - fd_s).abs() <= 1e-6, "sigma_dot at {t}");
        }
    }

    #[test]
    fn forward_diffuse_direct_substitution() {
        let (x_t, v) = forward_diffuse(&RF, &[0.0, 0.0], &[1.0, -1.0], 0.5).unwrap();
        assert_eq!(x_t, vec![0.5, -0.5]);
        assert_eq!(v, vec![1.0, -1.0]);

        let (x_t, v) = forward_diffuse(&RF, &[2.0], &[0.0], 0.25).unwrap();
        assert_eq!(x_t, vec![1.5]);
        assert_eq!(v, vec![-2.0]);
    }

    #[test]
    fn forward_diffuse_at_zero_time_is_identity() {
        let x0 = [0.3, -1.7, 2.2];
        let (x_t, _) = forward_diffuse(&RF, &x0, &[5.0, -3.0, 0.1], 0.0).unwrap();
        assert_eq!(x_t, x0.to_vec());
    }

    #[test]
    fn forward_diffuse_rejects_dimension_mismatch() {
        assert!(matches!(
            forward_diffuse(&RF, &[1.0], &[1.0, 2.0], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn velocity_target_is_eps_minus_x0_under_rectified_flow() {
        let x0 = [1.0, -0.5];
        let eps = [0.2, 0.9];
        for &t in &[0.0, 0.3, 1.0] {
            let (_, v) = forward_diffuse(&RF, &x0, &eps, t).unwrap();
            let expect: Vec<f64> = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn velocity_to_score_examples() {
        let s = velocity_to_score(&RF, &[0.0], &[1.0], 0.5).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-15);

        // v = -x_t/(1-t) makes the score vanish.
        let s = velocity_to_score(&RF, &[1.0], &[-2.0], 0.5).unwrap();
        assert!(s[0].abs() < 1e-15);

        let s = velocity_to_score(&RF, &[1.0], &[0.0], 0.25).unwrap();
        assert!((s[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn velocity_to_score_singular_at_zero() {
        assert!(matches!(
            velocity_to_score(&RF, &[1.0], &[1.0], 0.0),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn velocity_score_round_trip() {
        let x_t = [0.4, -2.3, 1.1];
        let v = [0.9, 0.0, -3.4];
        for &t in &[T_MIN, 0.2, 0.5, 0.8, 1.0 - T_MIN] {
            let s = velocity_to_score(&RF, &x_t, &v, t).unwrap();
            let back = score_to_velocity(&RF, &x_t, &s, t).unwrap();
            assert!(max_abs_diff(&v, &back) <= 1e-12, "round trip at t = {t}");
        }
    }

    #[test]
    fn velocity_x0_round_trip() {
        let x_t = [0.4, -2.3, 1.1];
        let v = [0.9, 0.0, -3.4];
        for &t in &[0.05, 0.2, 0.5, 0.8, 0.95] {
            let x0 = velocity_to_x0(&RF, &x_t, &v, t).unwrap();
            let back = x0_to_velocity(&RF, &x_t, &x0, t).unwrap();
            assert!(max_abs_diff(&v, &back) <= 1e-12, "round trip at t = {t}");
        }
        // Recovering eps from x0 divides by sigma, so cancellation grows as
        // t approaches the clamp edge; the guarantee there is looser.
        for &t in &[T_MIN, 1.0 - T_MIN] {
            let x0 = velocity_to_x0(&RF, &x_t, &v, t).unwrap();
            let back = x0_to_velocity(&RF, &x_t, &x0, t).unwrap();
            assert!(max_abs_diff(&v, &back) <= 1e-8, "clamp edge t = {t}");
        }
    }

    #[test]
    fn velocity_to_x0_examples() {
        // Exact inversion at t = 1: x_t = eps, v = eps - x0.
        let x0 = [1.5, -0.2];
        let eps = [0.3, 0.8];
        let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
        let pred = velocity_to_x0(&RF, &eps, &v, 1.0).unwrap();
        assert!(max_abs_diff(&pred, &x0) <= 1e-15);

        // Boundary t = 0.
        let pred = velocity_to_x0(&RF, &[0.7], &[9.9], 0.0).unwrap();
        assert_eq!(pred, vec![0.7]);

        let pred = velocity_to_x0(&RF, &[1.0], &[1.0], 0.5).unwrap();
        assert_eq!(pred, vec![0.5]);
    }

    #[test]
    fn drift_and_diffusion_examples() {
        let (f, g2) = drift_and_diffusion(&RF, 0.5).unwrap();
        assert!((f + 2.0).abs() < 1e-15 && (g2 - 2.0).abs() < 1e-15);

        let (f, g2) = drift_and_diffusion(&RF, 0.0).unwrap();
        assert!((f + 1.0).abs() < 1e-15 && g2.abs() < 1e-15);

        let (f, g2) = drift_and_diffusion(&RF, 0.75).unwrap();
        assert!((f + 4.0).abs() < 1e-12 && (g2 - 6.0).abs() < 1e-12);

        assert!(matches!(
            drift_and_diffusion(&RF, 1.0),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn drift_and_diffusion_matches_finite_difference_relations() {
        // f = d log alpha / dt, g^2 = d sigma^2 / dt - 2 f sigma^2.
        let h = 1e-6;
        for &t in &[0.1, 0.4, 0.6, 0.9] {
            let (f, g2) = drift_and_diffusion(&RF, t).unwrap();
            let fd_f = (RF.alpha(t + h).ln() - RF.alpha(t - h).ln()) / (2.0 * h);
            let sig2 = |u: f64| RF.sigma(u) * RF.sigma(u);
            let fd_dsig2 = (sig2(t + h) - sig2(t - h)) / (2.0 * h);
            let fd_g2 = fd_dsig2 - 2.0 * fd_f * sig2(t);
            assert!((f - fd_f).abs() <= 1e-6, "f at {t}: {f} vs {fd_f}");
            assert!((g2 - fd_g2).abs() <= 1e-6, "g2 at {t}: {g2} vs {fd_g2}");
        }
    }

    #[test]
    fn log_snr_values_and_monotonicity() {
        assert!(RF.log_snr(0.5).abs() < 1e-15);
        assert!((RF.log_snr(0.25) - 3.0_f64.ln()).abs() < 1e-15);
        assert!(RF.log_snr(0.3) > RF.log_snr(0.7));
        assert_eq!(RF.log_snr(0.0), f64::INFINITY);
        assert_eq!(RF.log_snr(1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn time_from_log_snr_inverts_log_snr() {
        for &t in &[0.01, 0.2, 0.5, 0.88, 0.999] {
            let lam = RF.log_snr(t);
            assert!((RF.time_from_log_snr(lam) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn generic_bisection_agrees_with_closed_form() {
        // Exercise the default trait body against the override.
        struct Generic;
        impl NoiseSchedule for Generic {
            fn alpha(&self, t: f64) -> f64 {
                1.0 - t
            }
            fn sigma(&self, t: f64) -> f64 {
                t
            }
            fn alpha_dot(&self, _t: f64) -> f64 {
                -1.0
            }
            fn sigma_dot(&self, _t: f64) -> f64 {
                1.0
            }
            fn id(&self) -> &'static str {
                "generic_rf"
            }
        }
        for &lam in &[-5.0, -1.0, 0.0, 2.5, 6.0] {
            let t_gen = Generic.time_from_log_snr(lam);
            let t_rf = RF.time_from_log_snr(lam);
            assert!((t_gen - t_rf).abs() < 1e-9, "lambda = {lam}");
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn score_round_trip_is_identity(
                t in 0.05_f64..0.95,
                x in proptest::collection::vec(-5.0_f64..5.0, 1..4),
                v in proptest::collection::vec(-5.0_f64..5.0, 1..4),
            ) {
                prop_assume!(x.len() == v.len());
                let s = velocity_to_score(&RF, &x, &v, t).unwrap();
                let back = score_to_velocity(&RF, &x, &s, t).unwrap();
                for (a, b) in back.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn x0_round_trip_is_identity(
                t in 0.05_f64..0.95,
                x in proptest::collection::vec(-5.0_f64..5.0, 1..4),
                v in proptest::collection::vec(-5.0_f64..5.0, 1..4),
            ) {
                prop_assume!(x.len() == v.len());
                let x0 = velocity_to_x0(&RF, &x, &v, t).unwrap();
                let back = x0_to_velocity(&RF, &x, &x0, t).unwrap();
                for (a, b) in back.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn forward_diffuse_velocity_is_eps_minus_x0(
                t in 0.0_f64..=1.0,
                x0 in proptest::collection::vec(-5.0_f64..5.0, 1..4),
                eps in proptest::collection::vec(-5.0_f64..5.0, 1..4),
            ) {
                prop_assume!(x0.len() == eps.len());
                let (_, v) = forward_diffuse(&RF, &x0, &eps, t).unwrap();
                for ((vi, e), x) in v.iter().zip(&eps).zip(&x0) {
                    prop_assert_eq!(*vi, e - x);
                }
            }
        }
    }

    #[test]
    fn clamp_time_bounds() {
        assert_eq!(clamp_time(-1.0), T_MIN);
        assert_eq!(clamp_time(2.0), 1.0 - T_MIN);
        assert_eq!(clamp_time(0.5), 0.5);
    }
}
