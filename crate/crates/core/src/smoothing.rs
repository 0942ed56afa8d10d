//! Randomized-smoothing surrogate `g_ε(θ) = E u(θ + ε)`, the trace-regularized
//! objective `v`, and the fourth-order remainder linking the two.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::objective::{Objective, ObjectiveError, StochasticGradient};
use crate::rng::StreamKey;

#[derive(Debug, thiserror::Error)]
pub enum SmoothingError {
    #[error("invalid smoothing request: {0}")]
    Invalid(String),
    #[error("non-finite objective value at draw {draw}")]
    NonFinite { draw: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Monte-Carlo estimate of `g_ε(θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothedEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_mc: usize,
    pub sigma: f64,
}

/// Sampling options for surrogate estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct McOptions {
    /// Pair every draw `ε` with `−ε`. Off for anything that mimics the
    /// optimizer; meant for reference computations.
    pub antithetic: bool,
}

/// `v(θ) = u(θ) + σ²/2 · tr H(θ)`.
pub fn v_value(obj: &dyn Objective, theta: &[f64], sigma: f64) -> f64 {
    obj.value(theta) + 0.5 * sigma * sigma * obj.trace_hessian(theta)
}

pub fn estimate_g_eps<R: Rng>(
    obj: &dyn Objective,
    theta: &[f64],
    sigma: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<SmoothedEstimate, SmoothingError> {
    estimate_g_eps_with(obj, theta, sigma, n_mc, McOptions::default(), rng)
}

pub fn estimate_g_eps_with<R: Rng>(
    obj: &dyn Objective,
    theta: &[f64],
    sigma: f64,
    n_mc: usize,
    opts: McOptions,
    rng: &mut R,
) -> Result<SmoothedEstimate, SmoothingError> {
    if n_mc < 2 {
        return Err(SmoothingError::Invalid("n_mc must be >= 2".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SmoothingError::Invalid(format!("sigma {sigma} must be >= 0")));
    }
    let d = obj.dim();
    let mut eps = vec![0.0; d];
    let mut point = vec![0.0; d];
    let eval = |eps: &[f64], point: &mut [f64], draw: usize| {
        for ((p, t), e) in point.iter_mut().zip(theta).zip(eps) {
            *p = t + sigma * e;
        }
        let u = obj.value(point);
        if u.is_finite() {
            Ok(u)
        } else {
            Err(SmoothingError::NonFinite { draw })
        }
    };

    // Welford over independent units (single draws, or antithetic pairs).
    let (mut mean, mut m2, mut units) = (0.0f64, 0.0f64, 0usize);
    let mut push = |x: f64| {
        units += 1;
        let delta = x - mean;
        mean += delta / units as f64;
        m2 += delta * (x - mean);
    };
    if opts.antithetic {
        for i in 0..n_mc / 2 {
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            let a = eval(&eps, &mut point, 2 * i)?;
            eps.iter_mut().for_each(|e| *e = -*e);
            let b = eval(&eps, &mut point, 2 * i + 1)?;
            push(0.5 * (a + b));
        }
    } else {
        for i in 0..n_mc {
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            push(eval(&eps, &mut point, i)?);
        }
    }
    let std_error = if units > 1 { (m2 / (units - 1) as f64 / units as f64).sqrt() } else { 0.0 };
    Ok(SmoothedEstimate { mean, std_error, n_mc, sigma })
}

/// Fourth-order remainder `E[R(θ, ε)] = σ⁴/24 · Σ ∂⁴u (δδ + δδ + δδ)`.
///
/// Odd orders vanish under the symmetric Gaussian; terms of order six and
/// above are not included, so for non-polynomial or high-degree objectives
/// `g_ε − v` differs from this by `O(σ⁶)`.
pub fn remainder_expectation(
    obj: &dyn Objective,
    theta: &[f64],
    sigma: f64,
) -> Result<f64, SmoothingError> {
    Ok(sigma.powi(4) / 24.0 * obj.fourth_contraction(theta)?)
}

/// One unbiased sample of `∇g_ε(θ)`: `∇U(θ + ε, X)` for fresh `ε` and `X`.
pub fn sample_grad_g_eps<G: StochasticGradient>(
    oracle: &G,
    theta: &[f64],
    sigma: f64,
    key: &StreamKey,
    draw: u64,
) -> Vec<f64> {
    use crate::rng::Slot;
    let mut rng = key.rng(draw, Slot::Perturb(0));
    let point: Vec<f64> = theta
        .iter()
        .map(|t| t + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let batch = oracle.sample_batch(key, draw);
    let mut out = vec![0.0; oracle.dim()];
    oracle.gradient(&point, &batch, &mut out);
    out
}

/// Summary of a surrogate evaluation at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateReport {
    pub g_eps_mean: f64,
    pub g_eps_se: f64,
    pub v: f64,
    pub remainder: f64,
    /// `g_eps_mean − v − remainder`.
    pub residual: f64,
}

pub fn surrogate_report<R: Rng>(
    obj: &dyn Objective,
    theta: &[f64],
    sigma: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<SurrogateReport, SmoothingError> {
    let g = estimate_g_eps(obj, theta, sigma, n_mc, rng)?;
    let v = v_value(obj, theta, sigma);
    let remainder = remainder_expectation(obj, theta, sigma)?;
    Ok(SurrogateReport {
        g_eps_mean: g.mean,
        g_eps_se: g.std_error,
        v,
        remainder,
        residual: g.mean - v - remainder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{DoubleWell, Quadratic, Quartic, StochasticGradientModel};
    use crate::rng::keyed_rng;
    use std::sync::Arc;

    #[test]
    fn v_examples() {
        let q = Quadratic::diagonal(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v_value(&q, &[0.0; 3], 0.5), 0.75);
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        assert_eq!(v_value(&w, &[0.7], 0.0), w.value_at(0.7));
        assert!((v_value(&w, &[1.0], 0.3) - 0.5855).abs() < 1e-12);
    }

    #[test]
    fn g_eps_quadratic_and_degenerate() {
        let q = Quadratic::diagonal(&[1.0]).unwrap();
        let mut rng = keyed_rng(&[31]);
        let e = estimate_g_eps(&q, &[0.0], 0.5, 100_000, &mut rng).unwrap();
        assert!((e.mean - 0.125).abs() <= 4.0 * e.std_error);
        let e = estimate_g_eps(&q, &[1.3], 0.0, 10, &mut rng).unwrap();
        assert_eq!(e.mean, q.value(&[1.3]));
        assert_eq!(e.std_error, 0.0);
        assert!(estimate_g_eps(&q, &[0.0], 0.5, 1, &mut rng).is_err());
    }

    #[test]
    fn g_eps_quartic_fourth_moment() {
        let mut rng = keyed_rng(&[32]);
        let e = estimate_g_eps(&Quartic, &[0.0], 0.1, 1_000_000, &mut rng).unwrap();
        assert!((e.mean - 3e-4).abs() <= 4.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn non_finite_draw_is_reported() {
        #[derive(Debug)]
        struct Blows;
        impl Objective for Blows {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, t: &[f64]) -> f64 {
                if t[0] > 0.5 { f64::NAN } else { 0.0 }
            }
            fn gradient_into(&self, _: &[f64], o: &mut [f64]) {
                o[0] = 0.0;
            }
        }
        let mut rng = keyed_rng(&[33]);
        let err = estimate_g_eps(&Blows, &[0.0], 1.0, 1000, &mut rng).unwrap_err();
        assert!(matches!(err, SmoothingError::NonFinite { .. }));
    }

    #[test]
    fn remainder_examples() {
        let q = Quadratic::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(remainder_expectation(&q, &[0.3, 0.1], 0.7).unwrap(), 0.0);
        let r = remainder_expectation(&Quartic, &[0.4], 0.1).unwrap();
        assert!((r - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn remainder_matches_mc_gap_on_double_well() {
        // For a degree-6 polynomial, g_ε − v = R₄ + (σ⁶/720)·15·u⁽⁶⁾ exactly:
        // the sixth-order term is the constant 15cσ⁶.
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let sigma = 0.2;
        let mut rng = keyed_rng(&[34]);
        let g = estimate_g_eps(&w, &[-1.0], sigma, 10_000_000, &mut rng).unwrap();
        let gap = g.mean - v_value(&w, &[-1.0], sigma);
        let r4 = remainder_expectation(&w, &[-1.0], sigma).unwrap();
        let sixth = 15.0 * w.c * sigma.powi(6);
        let tol = (4.0 * g.std_error).max(5.0 * sigma.powi(6));
        assert!((gap - r4).abs() <= tol, "gap {gap} r4 {r4}");
        assert!((gap - r4 - sixth).abs() <= 4.0 * g.std_error);
    }

    #[test]
    fn gradient_samples_are_unbiased_on_quadratic() {
        let a = Quadratic::new(2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let theta = [0.4, -0.8];
        let exact = a.gradient(&theta);
        let m = StochasticGradientModel::exact(Arc::new(a));
        let key = StreamKey::new(35, 0);
        let n = 100_000;
        for i in 0..2 {
            let xs: Vec<f64> = (0..n).map(|k| sample_grad_g_eps(&m, &theta, 0.3, &key, k)[i]).collect();
            let (mean, se) = crate::curvature::mean_and_se(&xs);
            assert!((mean - exact[i]).abs() <= 4.0 * se);
        }
        assert_eq!(sample_grad_g_eps(&m, &theta, 0.0, &key, 0), exact);
    }

    #[test]
    fn antithetic_is_unbiased() {
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let mut rng = keyed_rng(&[36]);
        let plain = estimate_g_eps(&w, &[0.5], 0.2, 2_000_000, &mut rng).unwrap();
        let anti = estimate_g_eps_with(&w, &[0.5], 0.2, 2_000_000, McOptions { antithetic: true }, &mut rng)
            .unwrap();
        let tol = 4.0 * (plain.std_error.powi(2) + anti.std_error.powi(2)).sqrt();
        assert!((plain.mean - anti.mean).abs() <= tol);
    }
}
