//! Matrix-free curvature probes: differenced Hessian-vector products,
//! Hutchinson trace estimation and Lanczos extreme eigenvalues.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::objective::{dot, norm};
use crate::rng::{Slot, StreamKey};

#[derive(Debug, thiserror::Error)]
pub enum CurvatureError {
    #[error("HVP direction must be non-zero")]
    ZeroDirection,
    #[error("non-finite Hessian-vector product at probe {probe}")]
    NonFinite { probe: usize },
    #[error("invalid curvature request: {0}")]
    Invalid(String),
}

/// `(∇L(θ + h v̂) − ∇L(θ − h v̂)) / (2h) · |v|` with `h = 1e-3 (1 + |θ|)`.
pub fn hvp_fd<G>(grad: G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>, CurvatureError>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let vn = norm(v);
    if vn == 0.0 {
        return Err(CurvatureError::ZeroDirection);
    }
    let h = 1e-3 * (1.0 + norm(theta));
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t + h * vi / vn).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t - h * vi / vn).collect();
    let gp = grad(&plus);
    let gm = grad(&minus);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h) * vn).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEstimate {
    pub mean: f64,
    pub se: f64,
    pub probes: usize,
}

/// Hutchinson estimator `tr H ≈ (1/m) Σ zᵢᵀ H zᵢ` with Rademacher probes.
///
/// Probe `i` is drawn from its own substream, so the estimate does not
/// depend on evaluation order.
pub fn hutchinson_trace<H>(
    hvp: H,
    dim: usize,
    m: usize,
    seed: u64,
) -> Result<TraceEstimate, CurvatureError>
where
    H: Fn(&[f64]) -> Vec<f64>,
{
    if m < 2 {
        return Err(CurvatureError::Invalid("Hutchinson needs at least 2 probes".into()));
    }
    let key = StreamKey::new(seed, 0);
    let mut samples = Vec::with_capacity(m);
    for i in 0..m {
        let mut rng = key.rng(i as u64, Slot::Probe);
        let z: Vec<f64> = (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let hz = hvp(&z);
        let s = dot(&z, &hz);
        if !s.is_finite() {
            return Err(CurvatureError::NonFinite { probe: i });
        }
        samples.push(s);
    }
    let (mean, se) = mean_and_se(&samples);
    Ok(TraceEstimate { mean, se, probes: m })
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LanczosOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub max_restarts: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-4, max_restarts: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanczosResult {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub converged: Vec<bool>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
}

const BREAKDOWN: f64 = 1e-14;

/// Top-`k` eigenvalues of a symmetric operator by Lanczos with full
/// reorthogonalization.
///
/// A Ritz value counts as converged once its residual `|β_j s_j|` is at most
/// `tol · |θ|`. On breakdown the recurrence continues from a fresh Gaussian
/// probe orthogonal to the current basis, at most `max_restarts` times.
pub fn lanczos_topk<H>(
    hvp: H,
    dim: usize,
    k: usize,
    opts: LanczosOptions,
    seed: u64,
) -> Result<LanczosResult, CurvatureError>
where
    H: Fn(&[f64]) -> Vec<f64>,
{
    if k == 0 || k > dim.min(50) {
        return Err(CurvatureError::Invalid(format!("k = {k} must be in 1..=min(dim, 50)")));
    }
    let key = StreamKey::new(seed, 0);
    let max_iters = opts.max_iters.min(dim);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut restarts = 0;

    let mut q = fresh_probe(&key, 0, dim, &basis).ok_or_else(|| {
        CurvatureError::Invalid("could not draw a starting probe".into())
    })?;
    let mut last: (Vec<f64>, Vec<bool>, Vec<f64>);
    loop {
        let j = basis.len();
        let mut w = hvp(&q);
        if w.iter().any(|x| !x.is_finite()) {
            return Err(CurvatureError::NonFinite { probe: j });
        }
        let a = dot(&q, &w);
        alpha.push(a);
        basis.push(q);
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
            }
        }
        let b = norm(&w);

        let (theta, last_row) = tridiagonal_eigen(&alpha, &beta);
        let m = theta.len();
        let take = k.min(m);
        let residuals: Vec<f64> = (0..take).map(|i| (b * last_row[m - 1 - i]).abs()).collect();
        let eig: Vec<f64> = (0..take).map(|i| theta[m - 1 - i]).collect();
        let conv: Vec<bool> = eig
            .iter()
            .zip(&residuals)
            .map(|(t, r)| *r <= opts.tol * t.abs().max(f64::MIN_POSITIVE))
            .collect();
        let done = take == k && conv.iter().all(|&c| c);
        last = (eig, conv, residuals);
        if basis.len() >= max_iters {
            break;
        }
        // An exhausted Krylov space may hide further copies of a repeated
        // eigenvalue, so breakdown restarts even when the Ritz values
        // already look converged.
        if b < BREAKDOWN {
            if restarts >= opts.max_restarts {
                break;
            }
            restarts += 1;
            match fresh_probe(&key, restarts as u64, dim, &basis) {
                Some(p) => {
                    beta.push(0.0);
                    q = p;
                }
                None => break,
            }
        } else if done {
            break;
        } else {
            beta.push(b);
            q = w.iter().map(|x| x / b).collect();
        }
    }
    let (eigenvalues, converged, residuals) = last;
    Ok(LanczosResult { eigenvalues, converged, residuals, iterations: basis.len(), restarts })
}

fn fresh_probe(key: &StreamKey, attempt: u64, dim: usize, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let mut rng = key.rng(attempt, Slot::Probe);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..2 {
        for b in basis {
            let c = dot(b, &v);
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
        }
    }
    let n = norm(&v);
    if n < 1e-10 {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

/// Eigenvalues (ascending) of the symmetric tridiagonal matrix with diagonal
/// `diag` and off-diagonal `off`, together with the last component of each
/// normalized eigenvector.
///
/// Implicit QL with Wilkinson-style shifts; only the last row of the
/// eigenvector matrix is accumulated because rotations act on rows
/// independently.
pub fn tridiagonal_eigen(diag: &[f64], off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&off[..n - 1]);
    let mut z = vec![0.0; n];
    z[n - 1] = 1.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let zh = z[i + 1];
                    z[i + 1] = s * z[i] + c * zh;
                    z[i] = c * z[i] - s * zh;
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    (order.iter().map(|&i| d[i]).collect(), order.iter().map(|&i| z[i]).collect())
}

/// Top eigenvalues plus a trace estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub top_eigenvalues: Vec<f64>,
    pub converged: Vec<bool>,
    pub trace_mean: f64,
    pub trace_se: f64,
    pub m_probes: usize,
    pub k: usize,
    pub lanczos_iterations: usize,
}

pub fn spectrum<H>(
    hvp: H,
    dim: usize,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<SpectrumReport, CurvatureError>
where
    H: Fn(&[f64]) -> Vec<f64>,
{
    let lz = lanczos_topk(&hvp, dim, k, LanczosOptions::default(), seed)?;
    let tr = hutchinson_trace(&hvp, dim, m, crate::rng::mix(&[seed, 0x7472]))?;
    Ok(SpectrumReport {
        top_eigenvalues: lz.eigenvalues,
        converged: lz.converged,
        trace_mean: tr.mean,
        trace_se: tr.se,
        m_probes: m,
        k,
        lanczos_iterations: lz.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{DoubleWell, Objective, Quadratic, Quartic};
    use crate::rng::keyed_rng;

    fn dense(a: &[f64], n: usize) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |v: &[f64]| (0..n).map(|i| dot(&a[i * n..(i + 1) * n], v)).collect()
    }

    fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = keyed_rng(&[seed]);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.sample(StandardNormal);
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        a
    }

    #[test]
    fn hvp_fd_quadratic_is_exact() {
        let q = Quadratic::new(2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let v = [0.3, -1.7];
        let h = hvp_fd(|x| q.gradient(x), &[0.5, 2.0], &v).unwrap();
        let exact = q.hvp(&[0.0, 0.0], &v);
        for i in 0..2 {
            assert!((h[i] - exact[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn hvp_fd_quartic_and_linearity() {
        let h = hvp_fd(|x| Quartic.gradient(x), &[1.0], &[1.0]).unwrap();
        assert!((h[0] - 12.0).abs() <= 1e-4);
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let a = hvp_fd(|x| w.gradient(x), &[0.4], &[0.7]).unwrap()[0];
        let b = hvp_fd(|x| w.gradient(x), &[0.4], &[1.4]).unwrap()[0];
        assert!((b - 2.0 * a).abs() <= 1e-9 * (1.0 + b.abs()));
        assert!(matches!(hvp_fd(|x| w.gradient(x), &[0.4], &[0.0]), Err(CurvatureError::ZeroDirection)));
    }

    #[test]
    fn hvp_fd_is_symmetric_on_smooth_builtins() {
        use crate::objective::{Objective, Quadratic, Quartic};
        let q = Quadratic::new(2, vec![3.0, 0.7, 0.7, 1.5]).unwrap();
        let objs: Vec<&dyn Objective> = vec![&q, &Quartic];
        let mut rng = keyed_rng(&[9]);
        for obj in objs {
            let d = obj.dim();
            for _ in 0..50 {
                let th: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = dot(&u, &hvp_fd(|x| obj.gradient(x), &th, &v).unwrap());
                let b = dot(&v, &hvp_fd(|x| obj.gradient(x), &th, &u).unwrap());
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hvp_fd_asymmetry_on_double_well_is_the_difference_bias() {
        // For a separable objective the central difference along v̂ gives
        // (Hv)_i + h²/6 · u⁗(θ_i) v̂_i² v_i + O(h⁴), so the asymmetry
        // ⟨u, Hv⟩ − ⟨v, Hu⟩ is h²/6 · Σ u⁗(θ_i) u_i v_i (v̂_i² − û_i²).
        let w = crate::objective::DoubleWell2d::new(0.3, 0.05).unwrap();
        let mut rng = keyed_rng(&[10]);
        for _ in 0..50 {
            let th: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = dot(&u, &hvp_fd(|x| w.gradient(x), &th, &v).unwrap());
            let b = dot(&v, &hvp_fd(|x| w.gradient(x), &th, &u).unwrap());
            let h = 1e-3 * (1.0 + norm(&th));
            let (nv, nu) = (norm(&v), norm(&u));
            let predicted: f64 = (0..2)
                .map(|i| {
                    let vh = v[i] / nv;
                    let uh = u[i] / nu;
                    h * h / 6.0 * w.well.fourth(th[i]) * u[i] * v[i] * (vh * vh - uh * uh)
                })
                .sum();
            assert!(((a - b) - predicted).abs() <= 1e-8 * (1.0 + a.abs()), "{} vs {predicted}", a - b);
        }
    }

    #[test]
    fn hutchinson_diagonal_has_zero_variance() {
        let a = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let t = hutchinson_trace(dense(&a, 3), 3, 50, 1).unwrap();
        assert_eq!(t.mean, 6.0);
        assert_eq!(t.se, 0.0);
    }

    #[test]
    fn hutchinson_sign_patterns_enumerate_to_trace() {
        let a = [2.0, 1.0, 1.0, 2.0];
        let h = dense(&a, 2);
        let mut vals = Vec::new();
        for mask in 0..4u32 {
            let z: Vec<f64> = (0..2).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
            vals.push(dot(&z, &h(&z)));
        }
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![2.0, 2.0, 6.0, 6.0]);
        assert_eq!(vals.iter().sum::<f64>() / 4.0, 4.0);
    }

    #[test]
    fn hutchinson_se_scales_like_inverse_sqrt_m() {
        let n = 20;
        let a = random_symmetric(n, 11);
        let scaled: Vec<f64> = [250usize, 1000, 4000]
            .iter()
            .map(|&m| hutchinson_trace(dense(&a, n), n, m, 5).unwrap().se * (m as f64).sqrt())
            .collect();
        let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scaled.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo <= 1.25, "{scaled:?}");
    }

    #[test]
    fn hutchinson_rejects_single_probe_and_nan() {
        let a = [1.0];
        assert!(hutchinson_trace(dense(&a, 1), 1, 1, 0).is_err());
        let bad = |_: &[f64]| vec![f64::NAN];
        assert!(matches!(hutchinson_trace(bad, 1, 4, 0), Err(CurvatureError::NonFinite { probe: 0 })));
    }

    #[test]
    fn tridiagonal_small_cases() {
        let (ev, last) = tridiagonal_eigen(&[2.0, 2.0], &[1.0]);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        assert!((last[0].abs() - 0.5f64.sqrt()).abs() < 1e-14);
        let (ev, last) = tridiagonal_eigen(&[5.0], &[]);
        assert_eq!((ev[0], last[0]), (5.0, 1.0));
    }

    #[test]
    fn lanczos_diagonal() {
        let a = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let r = lanczos_topk(dense(&a, 3), 3, 1, LanczosOptions::default(), 3).unwrap();
        assert!((r.eigenvalues[0] - 3.0).abs() < 1e-6);
        let r = lanczos_topk(dense(&a, 3), 3, 3, LanczosOptions::default(), 3).unwrap();
        for (e, x) in r.eigenvalues.iter().zip([3.0, 2.0, 1.0]) {
            assert!((e - x).abs() < 1e-6);
        }
        assert!(r.converged.iter().all(|&c| c));
        assert!(r.iterations <= 3);
    }

    #[test]
    fn lanczos_restarts_on_repeated_eigenvalues() {
        // Identity-like spectrum: a single Krylov vector spans only one
        // direction of the eigenspace, forcing breakdown and restart.
        let n = 4;
        let mut a = vec![0.0; n * n];
        for (i, v) in [2.0, 2.0, 1.0, 1.0].iter().enumerate() {
            a[i * n + i] = *v;
        }
        let r = lanczos_topk(dense(&a, n), n, 2, LanczosOptions::default(), 8).unwrap();
        assert!((r.eigenvalues[0] - 2.0).abs() < 1e-10);
        assert!((r.eigenvalues[1] - 2.0).abs() < 1e-10, "{r:?}");
        assert!(r.restarts >= 1);
    }

    #[test]
    fn lanczos_flags_unconverged_values() {
        let n = 200;
        let a = random_symmetric(n, 21);
        let opts = LanczosOptions { max_iters: 5, ..Default::default() };
        let r = lanczos_topk(dense(&a, n), n, 3, opts, 1).unwrap();
        assert_eq!(r.iterations, 5);
        assert!(r.converged.iter().any(|&c| !c));
    }

    #[test]
    fn lanczos_matches_power_iteration_on_quadratic() {
        let q = Quadratic::new(3, vec![4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]).unwrap();
        let h = |v: &[f64]| q.hvp(&[0.0; 3], v);
        let mut v = vec![1.0, 1.0, 1.0];
        let mut lam = 0.0;
        for _ in 0..2000 {
            let w = h(&v);
            lam = dot(&v, &w);
            let n = norm(&w);
            v = w.iter().map(|x| x / n).collect();
        }
        let r = lanczos_topk(h, 3, 1, LanczosOptions::default(), 0).unwrap();
        assert!((r.eigenvalues[0] - lam).abs() <= 1e-6);
    }
}
