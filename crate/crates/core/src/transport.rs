//! Empirical Wasserstein distances.

use rand::Rng;
use serde::Serialize;

use crate::gibbs::GridMeasure;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("sample cloud must be non-empty")]
    Empty,
    #[error("non-finite coordinate in sample cloud at point {0}")]
    NonFinite(usize),
    #[error("ragged sample cloud: point {index} has dimension {got}, expected {expected}")]
    Ragged { index: usize, expected: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("assignment needs equal sizes, got {0} and {1}")]
    SizeMismatch(usize, usize),
    #[error("assignment size {0} exceeds 1024")]
    TooLarge(usize),
    #[error("order p must be 1 or 2, got {0}")]
    BadOrder(u32),
}

/// Uniformly weighted points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    points: Vec<f64>,
    dim: usize,
}

impl SampleCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, TransportError> {
        let dim = points.first().ok_or(TransportError::Empty)?.len();
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(TransportError::Ragged { index: i, expected: dim, got: p.len() });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(TransportError::NonFinite(i));
            }
            flat.extend_from_slice(p);
        }
        if dim == 0 {
            return Err(TransportError::Empty);
        }
        Ok(Self { points: flat, dim })
    }

    pub fn from_scalars(xs: &[f64]) -> Result<Self, TransportError> {
        Self::new(xs.iter().map(|&x| vec![x]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn sorted_scalars(&self) -> Vec<f64> {
        let mut v = self.points.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

fn check_order(p: u32) -> Result<(), TransportError> {
    if p == 1 || p == 2 {
        Ok(())
    } else {
        Err(TransportError::BadOrder(p))
    }
}

/// Result of a 1D distance, noting whether the larger cloud was resampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distance1d {
    pub value: f64,
    pub resampled: bool,
}

/// Exact `W_p` between two 1D empirical measures by sorted coupling.
///
/// Unequal sizes are handled by replacing the larger cloud with its
/// empirical quantiles at `(i + ½)/n` for the smaller size `n`.
pub fn wp_1d(a: &SampleCloud, b: &SampleCloud, p: u32) -> Result<Distance1d, TransportError> {
    check_order(p)?;
    if a.dim() != 1 || b.dim() != 1 {
        return Err(TransportError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut sa = a.sorted_scalars();
    let mut sb = b.sorted_scalars();
    let resampled = sa.len() != sb.len();
    if sa.len() > sb.len() {
        sa = quantile_resample(&sa, sb.len());
    } else if sb.len() > sa.len() {
        sb = quantile_resample(&sb, sa.len());
    }
    let n = sa.len() as f64;
    let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs().powi(p as i32)).sum();
    Ok(Distance1d { value: (sum / n).powf(1.0 / p as f64), resampled })
}

fn quantile_resample(sorted: &[f64], n: usize) -> Vec<f64> {
    let m = sorted.len();
    (0..n)
        .map(|i| {
            let idx = (((i as f64 + 0.5) / n as f64) * m as f64).floor() as usize;
            sorted[idx.min(m - 1)]
        })
        .collect()
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
///
/// Shortest augmenting paths with row/column potentials, `O(n³)`. Returns
/// the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays with a virtual column 0, as in the classic formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

fn pair_cost(x: &[f64], y: &[f64], p: u32) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if p == 2 {
        d2
    } else {
        d2.sqrt()
    }
}

/// `W_p` between equal-size clouds in any dimension by optimal assignment.
pub fn wp_assignment(a: &SampleCloud, b: &SampleCloud, p: u32) -> Result<f64, TransportError> {
    check_order(p)?;
    if a.dim() != b.dim() {
        return Err(TransportError::DimensionMismatch(a.dim(), b.dim()));
    }
    let n = a.len();
    if n != b.len() {
        return Err(TransportError::SizeMismatch(n, b.len()));
    }
    if n > 1024 {
        return Err(TransportError::TooLarge(n));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = pair_cost(a.point(i), b.point(j), p);
        }
    }
    let assign = hungarian(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).powf(1.0 / p as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceEstimate {
    pub w: f64,
    pub se: f64,
    pub resamples: usize,
}

const REFERENCE_RESAMPLES: usize = 8;

/// `W_p` between a cloud and a grid measure: the measure is sampled `n_ref`
/// times, the distance computed exactly between clouds, and the procedure
/// repeated over 8 independent reference draws.
///
/// 1D uses sorted coupling. In 2D the cloud and every reference draw must
/// have the same size (≤ 1024) for the assignment solver.
pub fn wp_to_measure<R: Rng>(
    cloud: &SampleCloud,
    m: &GridMeasure,
    p: u32,
    n_ref: usize,
    rng: &mut R,
) -> Result<DistanceEstimate, TransportError> {
    check_order(p)?;
    if cloud.dim() != m.dim() {
        return Err(TransportError::DimensionMismatch(cloud.dim(), m.dim()));
    }
    let mut ws = Vec::with_capacity(REFERENCE_RESAMPLES);
    for _ in 0..REFERENCE_RESAMPLES {
        let reference = SampleCloud::new(m.sample(n_ref, rng))?;
        let w = if cloud.dim() == 1 {
            wp_1d(cloud, &reference, p)?.value
        } else {
            wp_assignment(cloud, &reference, p)?
        };
        ws.push(w);
    }
    let (w, se) = crate::curvature::mean_and_se(&ws);
    Ok(DistanceEstimate { w, se, resamples: REFERENCE_RESAMPLES })
}

/// Exact `W₁` between a 1D empirical measure and a 1D grid measure,
/// `∫ |F_n(x) − F(x)| dx`, with `F` the CDF of the piecewise-linear density.
pub fn w1_to_measure_1d(cloud: &SampleCloud, m: &GridMeasure) -> Result<f64, TransportError> {
    if cloud.dim() != 1 || m.dim() != 1 {
        return Err(TransportError::DimensionMismatch(cloud.dim(), m.dim()));
    }
    let xs = cloud.sorted_scalars();
    let n = xs.len() as f64;
    let cdf = m.cdf_table().map_err(|_| TransportError::DimensionMismatch(1, m.dim()))?;
    let nodes = m.grid().axis(0);
    let lo = nodes[0].min(xs[0]);
    let hi = nodes[nodes.len() - 1].max(xs[xs.len() - 1]);
    // Breakpoints: grid nodes and sample points; between consecutive
    // breakpoints F_n is constant and F is quadratic, so Simpson is exact
    // unless the integrand changes sign inside, which a midpoint split
    // handles to second order.
    let mut bps: Vec<f64> = nodes.iter().cloned().chain(xs.iter().cloned()).collect();
    bps.push(lo);
    bps.push(hi);
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let mut total = 0.0;
    let mut k = 0usize;
    for w in bps.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        while k < xs.len() && xs[k] <= a {
            k += 1;
        }
        let fn_val = k as f64 / n;
        let fa = cdf.eval(a) - fn_val;
        let fm = cdf.eval(0.5 * (a + b)) - fn_val;
        let fb = cdf.eval(b) - fn_val;
        total += if fa * fb >= 0.0 && fa * fm >= 0.0 {
            (b - a) / 6.0 * (fa.abs() + 4.0 * fm.abs() + fb.abs())
        } else {
            let q1 = 0.5 * (a + 0.5 * (a + b));
            let q3 = 0.5 * (0.5 * (a + b) + b);
            let f1 = cdf.eval(q1) - fn_val;
            let f3 = cdf.eval(q3) - fn_val;
            (b - a) / 12.0 * (fa.abs() + 4.0 * f1.abs() + 2.0 * fm.abs() + 4.0 * f3.abs() + fb.abs())
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use rand_distr::StandardNormal;

    fn cloud1(xs: &[f64]) -> SampleCloud {
        SampleCloud::from_scalars(xs).unwrap()
    }

    fn random_cloud(n: usize, d: usize, rng: &mut impl Rng) -> SampleCloud {
        SampleCloud::new((0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()).unwrap()
    }

    fn brute_force(a: &SampleCloud, b: &SampleCloud, p: u32) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for q in perms(n - 1) {
                for pos in 0..=q.len() {
                    let mut r = q.clone();
                    r.insert(pos, n - 1);
                    out.push(r);
                }
            }
            out
        }
        let n = a.len();
        let cost = |i: usize, j: usize| {
            let d2: f64 = a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            d2.sqrt().powi(p as i32)
        };
        let best = perms(n).iter().map(|q| (0..n).map(|i| cost(i, q[i])).sum::<f64>()).fold(f64::INFINITY, f64::min);
        (best / n as f64).powf(1.0 / p as f64)
    }

    #[test]
    fn assignment_matches_permutation_enumeration() {
        let mut rng = keyed_rng(&[31]);
        for inst in 0..60 {
            let n = 1 + inst % 6;
            let (a, b) = (random_cloud(n, 2, &mut rng), random_cloud(n, 2, &mut rng));
            for p in [1, 2] {
                let got = wp_assignment(&a, &b, p).unwrap();
                assert!((got - brute_force(&a, &b, p)).abs() <= 1e-12, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn assignment_equals_sorted_coupling_in_1d() {
        let mut rng = keyed_rng(&[32]);
        for n in [1, 2, 7, 50, 200] {
            let (a, b) = (random_cloud(n, 1, &mut rng), random_cloud(n, 1, &mut rng));
            for p in [1, 2] {
                let h = wp_assignment(&a, &b, p).unwrap();
                let s = wp_1d(&a, &b, p).unwrap().value;
                assert!((h - s).abs() <= 1e-10, "n={n} p={p}: {h} vs {s}");
            }
        }
    }

    #[test]
    fn cloud_from_the_measure_is_near_the_self_distance() {
        use crate::gibbs::{build_gibbs, EnergyKind, GridSpec};
        use crate::objective::Quadratic;
        let q = Quadratic::diagonal(&[1.0]).unwrap();
        let m = build_gibbs(&q, &EnergyKind::U, 1.0, &GridSpec::interval(-8.0, 8.0, 2048)).unwrap();
        let mut rng = keyed_rng(&[33]);
        let cloud = SampleCloud::new(m.sample(10_000, &mut rng)).unwrap();
        let w = wp_to_measure(&cloud, &m, 2, 10_000, &mut rng).unwrap();
        let x = SampleCloud::new(m.sample(10_000, &mut rng)).unwrap();
        let y = SampleCloud::new(m.sample(10_000, &mut rng)).unwrap();
        let baseline = wp_1d(&x, &y, 2).unwrap().value;
        assert!(w.w <= 3.0 * baseline, "{} vs baseline {baseline}", w.w);
    }

    #[test]
    fn point_mass_at_the_mode_of_a_sharp_measure() {
        use crate::gibbs::{build_gibbs, EnergyKind, GridSpec};
        use crate::objective::Quadratic;
        let q = Quadratic::diagonal(&[1.0]).unwrap();
        let grid = GridSpec::interval(-0.05, 0.05, 401);
        let m = build_gibbs(&q, &EnergyKind::U, 1e6, &grid).unwrap();
        let mode = m.mode();
        let cloud = SampleCloud::new(vec![mode; 100]).unwrap();
        let w = wp_to_measure(&cloud, &m, 2, 1000, &mut keyed_rng(&[34])).unwrap();
        let cell = grid.spacing(0);
        assert!(w.w <= 2.0 * cell.max(1e-3), "{} vs cell {cell}", w.w);
    }

    #[test]
    fn one_d_examples() {
        assert_eq!(wp_1d(&cloud1(&[0.0]), &cloud1(&[3.0]), 1).unwrap().value, 3.0);
        assert_eq!(wp_1d(&cloud1(&[0.0, 2.0]), &cloud1(&[3.0, 1.0]), 1).unwrap().value, 1.0);
        let a = [0.3, -1.2, 4.0, 2.2];
        let shifted: Vec<f64> = a.iter().map(|x| x - 0.75).collect();
        let w = wp_1d(&cloud1(&a), &cloud1(&shifted), 1).unwrap();
        assert!((w.value - 0.75).abs() < 1e-12);
        assert!(!w.resampled);
    }

    #[test]
    fn unequal_sizes_are_resampled() {
        let w = wp_1d(&cloud1(&[0.0, 1.0, 2.0, 3.0]), &cloud1(&[0.0, 2.0]), 1).unwrap();
        assert!(w.resampled);
        assert!(w.value.is_finite());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(SampleCloud::new(vec![]), Err(TransportError::Empty)));
        assert!(matches!(SampleCloud::from_scalars(&[f64::NAN]), Err(TransportError::NonFinite(0))));
        assert!(wp_1d(&cloud1(&[0.0]), &cloud1(&[0.0]), 3).is_err());
        let a = cloud1(&[0.0, 1.0]);
        assert!(matches!(wp_assignment(&a, &cloud1(&[0.0]), 1), Err(TransportError::SizeMismatch(2, 1))));
        let big = cloud1(&vec![0.0; 1025]);
        assert!(matches!(wp_assignment(&big, &big, 1), Err(TransportError::TooLarge(1025))));
    }

    #[test]
    fn identical_clouds_have_zero_assignment_cost() {
        let mut rng = keyed_rng(&[41]);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random(), rng.random()]).collect();
        let a = SampleCloud::new(pts).unwrap();
        assert_eq!(wp_assignment(&a, &a, 2).unwrap(), 0.0);
    }

    #[test]
    fn hungarian_small_known_case() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = hungarian(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn gaussian_shift_w2() {
        let mut rng = keyed_rng(&[42]);
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let w = wp_1d(&cloud1(&a), &cloud1(&b), 2).unwrap().value;
        // Sampling error of W₂² for equal-variance Gaussians is about
        // sqrt(2/n)·|Δ|, so 4·SE ≈ 0.018.
        assert!((w - 1.0).abs() <= 4.0 * (2.0 / n as f64).sqrt(), "{w}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), n)
        }

        proptest! {
            #[test]
            fn metric_axioms_1d(a in cloud_strategy(7, 1), b in cloud_strategy(7, 1), c in cloud_strategy(7, 1)) {
                let (a, b, c) = (SampleCloud::new(a).unwrap(), SampleCloud::new(b).unwrap(), SampleCloud::new(c).unwrap());
                for p in [1, 2] {
                    let ab = wp_1d(&a, &b, p).unwrap().value;
                    let ba = wp_1d(&b, &a, p).unwrap().value;
                    let bc = wp_1d(&b, &c, p).unwrap().value;
                    let ac = wp_1d(&a, &c, p).unwrap().value;
                    prop_assert_eq!(ab, ba);
                    prop_assert!(ac <= ab + bc + 1e-9);
                }
                prop_assert!(wp_1d(&a, &b, 1).unwrap().value <= wp_1d(&a, &b, 2).unwrap().value + 1e-12);
                if wp_1d(&a, &b, 1).unwrap().value == 0.0 {
                    prop_assert_eq!(a.sorted_scalars(), b.sorted_scalars());
                }
            }

            #[test]
            fn assignment_metric_axioms_2d(a in cloud_strategy(5, 2), b in cloud_strategy(5, 2), c in cloud_strategy(5, 2)) {
                let (a, b, c) = (SampleCloud::new(a).unwrap(), SampleCloud::new(b).unwrap(), SampleCloud::new(c).unwrap());
                for p in [1, 2] {
                    let ab = wp_assignment(&a, &b, p).unwrap();
                    let ba = wp_assignment(&b, &a, p).unwrap();
                    let bc = wp_assignment(&b, &c, p).unwrap();
                    let ac = wp_assignment(&a, &c, p).unwrap();
                    prop_assert!((ab - ba).abs() <= 1e-12);
                    prop_assert!(ac <= ab + bc + 1e-9);
                }
                prop_assert!(wp_assignment(&a, &b, 1).unwrap() <= wp_assignment(&a, &b, 2).unwrap() + 1e-12);
            }
        }
    }
}
