//! Differentiable objectives, the builtin analytic suite, and stochastic
//! gradient models.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::rng::{Slot, StreamKey};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid objective: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown objective id `{0}`")]
    UnknownId(String),
    #[error("differenced fourth derivatives need dim <= 2, got {0}")]
    UnsupportedDimension(usize),
    #[error("no dissipativity certificate on ladder")]
    NoDissipativityCertificate,
}

/// A smooth scalar field with first and second order access.
///
/// `hvp`, `trace_hessian` and `fourth_contraction` have differenced
/// defaults; the builtins override all of them analytically.
pub trait Objective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> f64;

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]);

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(theta, &mut out);
        out
    }

    /// Hessian-vector product. Differenced from the gradient by default.
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        crate::curvature::hvp_fd(|x| self.gradient(x), theta, v)
            .unwrap_or_else(|_| vec![0.0; self.dim()])
    }

    fn trace_hessian(&self, theta: &[f64]) -> f64 {
        let d = self.dim();
        let mut e = vec![0.0; d];
        let mut tr = 0.0;
        for i in 0..d {
            e[i] = 1.0;
            tr += self.hvp(theta, &e)[i];
            e[i] = 0.0;
        }
        tr
    }

    /// `sum_{i,j,k,l} d4u/(di dj dk dl) * (δij δkl + δik δjl + δil δjk)`,
    /// which equals `3 * sum_{i,j} d4u/(di² dj²)`.
    ///
    /// The default differences the Hessian trace twice (bi-Laplacian) and is
    /// only offered for `dim <= 2`.
    fn fourth_contraction(&self, theta: &[f64]) -> Result<f64, ObjectiveError> {
        let d = self.dim();
        if d > 2 {
            return Err(ObjectiveError::UnsupportedDimension(d));
        }
        let h = 1e-2 * (1.0 + norm(theta));
        let center = self.trace_hessian(theta);
        let mut x = theta.to_vec();
        let mut lap = 0.0;
        for i in 0..d {
            x[i] = theta[i] + h;
            let fp = self.trace_hessian(&x);
            x[i] = theta[i] - h;
            let fm = self.trace_hessian(&x);
            x[i] = theta[i];
            lap += (fp - 2.0 * center + fm) / (h * h);
        }
        Ok(3.0 * lap)
    }

    /// Continuous differentiability order when known analytically.
    fn smoothness_order(&self) -> Option<u32> {
        None
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient with step `1e-4 * (1 + |θ|)`.
pub fn fd_gradient(obj: &dyn Objective, theta: &[f64]) -> Vec<f64> {
    let h = 1e-4 * (1.0 + norm(theta));
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let fp = obj.value(&x);
            x[i] = theta[i] - h;
            let fm = obj.value(&x);
            x[i] = theta[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `u(θ) = ½ θᵀAθ` for symmetric positive-definite `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    a: Vec<f64>,
}

impl Quadratic {
    /// `a` is row-major `dim × dim`.
    pub fn new(dim: usize, a: Vec<f64>) -> Result<Self, ObjectiveError> {
        if dim == 0 || a.len() != dim * dim {
            return Err(ObjectiveError::Invalid(format!(
                "quadratic needs {} coefficients, got {}",
                dim * dim,
                a.len()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::Invalid("non-finite coefficient".into()));
        }
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in 0..i {
                if (a[i * dim + j] - a[j * dim + i]).abs() > 1e-12 * scale {
                    return Err(ObjectiveError::Invalid(format!(
                        "coefficient matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if !cholesky_ok(dim, &a) {
            return Err(ObjectiveError::Invalid(
                "coefficient matrix not positive definite".into(),
            ));
        }
        Ok(Self { dim, a })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self, ObjectiveError> {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, v) in diag.iter().enumerate() {
            a[i * d + i] = *v;
        }
        Self::new(d, a)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.a[i * self.dim..(i + 1) * self.dim], v);
        }
    }
}

fn cholesky_ok(d: usize, a: &[f64]) -> bool {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    true
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, theta: &[f64]) -> f64 {
        let mut av = vec![0.0; self.dim];
        self.apply(theta, &mut av);
        0.5 * dot(theta, &av)
    }
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        self.apply(theta, out);
    }
    fn hvp(&self, _theta: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply(v, &mut out);
        out
    }
    fn trace_hessian(&self, _theta: &[f64]) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }
    fn fourth_contraction(&self, _theta: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(0.0)
    }
    fn smoothness_order(&self) -> Option<u32> {
        Some(u32::MAX)
    }
}

/// Tilted double well `u(x) = (x²−1)²(1+γx) + c·x⁶`.
///
/// The tilt makes the right well sharper than the left one; the sextic term
/// keeps the function confining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoubleWell {
    pub gamma: f64,
    pub c: f64,
}

impl DoubleWell {
    /// `gamma ∈ [0, 0.5)`, `c ∈ (0, 0.2)`.
    pub fn new(gamma: f64, c: f64) -> Result<Self, ObjectiveError> {
        if !(0.0..0.5).contains(&gamma) {
            return Err(ObjectiveError::Invalid(format!(
                "double-well tilt {gamma} outside [0, 0.5)"
            )));
        }
        if !(c > 0.0 && c < 0.2) {
            return Err(ObjectiveError::Invalid(format!(
                "double-well confinement {c} outside (0, 0.2)"
            )));
        }
        Ok(Self { gamma, c })
    }

    /// Derivatives of order 0 through 6 at `x`.
    pub fn derivatives(&self, x: f64) -> [f64; 7] {
        let (g, c) = (self.gamma, self.c);
        let x2 = x * x;
        let p = [
            (x2 - 1.0) * (x2 - 1.0),
            4.0 * x * x2 - 4.0 * x,
            12.0 * x2 - 4.0,
            24.0 * x,
            24.0,
        ];
        let q = 1.0 + g * x;
        let x3 = x2 * x;
        let x4 = x2 * x2;
        [
            p[0] * q + c * x4 * x2,
            p[1] * q + g * p[0] + 6.0 * c * x4 * x,
            p[2] * q + 2.0 * g * p[1] + 30.0 * c * x4,
            p[3] * q + 3.0 * g * p[2] + 120.0 * c * x3,
            p[4] * q + 4.0 * g * p[3] + 360.0 * c * x2,
            5.0 * g * p[4] + 720.0 * c * x,
            720.0 * c,
        ]
    }

    pub fn value_at(&self, x: f64) -> f64 {
        self.derivatives(x)[0]
    }
    pub fn first(&self, x: f64) -> f64 {
        self.derivatives(x)[1]
    }
    pub fn second(&self, x: f64) -> f64 {
        self.derivatives(x)[2]
    }
    pub fn fourth(&self, x: f64) -> f64 {
        self.derivatives(x)[4]
    }
}

impl Objective for DoubleWell {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, theta: &[f64]) -> f64 {
        self.value_at(theta[0])
    }
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        out[0] = self.first(theta[0]);
    }
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        vec![self.second(theta[0]) * v[0]]
    }
    fn trace_hessian(&self, theta: &[f64]) -> f64 {
        self.second(theta[0])
    }
    fn fourth_contraction(&self, theta: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(3.0 * self.fourth(theta[0]))
    }
    fn smoothness_order(&self) -> Option<u32> {
        Some(u32::MAX)
    }
}

/// Separable sum of two identical double wells, `u(x, y) = w(x) + w(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell2d {
    pub well: DoubleWell,
}

impl DoubleWell2d {
    pub fn new(gamma: f64, c: f64) -> Result<Self, ObjectiveError> {
        Ok(Self { well: DoubleWell::new(gamma, c)? })
    }
}

impl Objective for DoubleWell2d {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, theta: &[f64]) -> f64 {
        self.well.value_at(theta[0]) + self.well.value_at(theta[1])
    }
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        out[0] = self.well.first(theta[0]);
        out[1] = self.well.first(theta[1]);
    }
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        vec![self.well.second(theta[0]) * v[0], self.well.second(theta[1]) * v[1]]
    }
    fn trace_hessian(&self, theta: &[f64]) -> f64 {
        self.well.second(theta[0]) + self.well.second(theta[1])
    }
    fn fourth_contraction(&self, theta: &[f64]) -> Result<f64, ObjectiveError> {
        // Mixed fourth partials vanish for a separable sum.
        Ok(3.0 * (self.well.fourth(theta[0]) + self.well.fourth(theta[1])))
    }
    fn smoothness_order(&self) -> Option<u32> {
        Some(u32::MAX)
    }
}

/// `u(x) = x⁴` in one dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct Quartic;

impl Objective for Quartic {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, theta: &[f64]) -> f64 {
        theta[0].powi(4)
    }
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        out[0] = 4.0 * theta[0].powi(3);
    }
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        vec![12.0 * theta[0] * theta[0] * v[0]]
    }
    fn trace_hessian(&self, theta: &[f64]) -> f64 {
        12.0 * theta[0] * theta[0]
    }
    fn fourth_contraction(&self, _theta: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(72.0)
    }
    fn smoothness_order(&self) -> Option<u32> {
        Some(u32::MAX)
    }
}

/// Mean of component objectives.
#[derive(Debug, Clone)]
pub struct FiniteSum {
    components: Vec<Arc<dyn Objective>>,
    dim: usize,
}

impl FiniteSum {
    pub fn new(components: Vec<Arc<dyn Objective>>) -> Result<Self, ObjectiveError> {
        let first = components
            .first()
            .ok_or_else(|| ObjectiveError::Invalid("finite sum needs at least one component".into()))?;
        let dim = first.dim();
        for c in &components {
            if c.dim() != dim {
                return Err(ObjectiveError::DimensionMismatch { expected: dim, got: c.dim() });
            }
        }
        Ok(Self { components, dim })
    }

    pub fn components(&self) -> &[Arc<dyn Objective>] {
        &self.components
    }

    fn mean_of(&self, f: impl Fn(&dyn Objective) -> f64) -> f64 {
        self.components.iter().map(|c| f(c.as_ref())).sum::<f64>() / self.components.len() as f64
    }
}

impl Objective for FiniteSum {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, theta: &[f64]) -> f64 {
        self.mean_of(|c| c.value(theta))
    }
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        mean_gradient(&self.components, 0..self.components.len(), theta, out);
    }
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, h) in out.iter_mut().zip(c.hvp(theta, v)) {
                *o += h;
            }
        }
        let n = self.components.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
    fn trace_hessian(&self, theta: &[f64]) -> f64 {
        self.mean_of(|c| c.trace_hessian(theta))
    }
    fn fourth_contraction(&self, theta: &[f64]) -> Result<f64, ObjectiveError> {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.fourth_contraction(theta)?;
        }
        Ok(acc / self.components.len() as f64)
    }
    fn smoothness_order(&self) -> Option<u32> {
        self.components.iter().map(|c| c.smoothness_order()).min().flatten()
    }
}

fn mean_gradient(
    components: &[Arc<dyn Objective>],
    indices: impl ExactSizeIterator<Item = usize>,
    theta: &[f64],
    out: &mut [f64],
) {
    let n = indices.len() as f64;
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut g = vec![0.0; out.len()];
    for i in indices {
        components[i].gradient_into(theta, &mut g);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o += gi;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
}

/// Resolves a string identifier such as `quadratic:1,2,3`,
/// `doublewell:0.3,0.05`, `doublewell2d:0.3,0.05` or `quartic`.
pub fn parse_objective(id: &str) -> Result<Arc<dyn Objective>, ObjectiveError> {
    let (name, args) = match id.split_once(':') {
        Some((n, a)) => (n.trim(), a.trim()),
        None => (id.trim(), ""),
    };
    let nums = || -> Result<Vec<f64>, ObjectiveError> {
        if args.is_empty() {
            return Ok(Vec::new());
        }
        args.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| ObjectiveError::UnknownId(id.to_string())))
            .collect()
    };
    match name {
        "quadratic" => {
            let d = nums()?;
            if d.is_empty() {
                return Err(ObjectiveError::UnknownId(id.to_string()));
            }
            Ok(Arc::new(Quadratic::diagonal(&d)?))
        }
        "doublewell" | "doublewell2d" => {
            let p = nums()?;
            if p.len() != 2 {
                return Err(ObjectiveError::UnknownId(id.to_string()));
            }
            if name == "doublewell" {
                Ok(Arc::new(DoubleWell::new(p[0], p[1])?))
            } else {
                Ok(Arc::new(DoubleWell2d::new(p[0], p[1])?))
            }
        }
        "quartic" if args.is_empty() => Ok(Arc::new(Quartic)),
        _ => Err(ObjectiveError::UnknownId(id.to_string())),
    }
}

/// Source of unbiased stochastic gradients `∇U(θ, X)`.
///
/// A step first draws its data `X` (the batch) and may then evaluate the
/// gradient at several points with the same batch.
pub trait StochasticGradient: Sync {
    type Batch;

    fn dim(&self) -> usize;

    fn sample_batch(&self, key: &StreamKey, step: u64) -> Self::Batch;

    fn gradient(&self, theta: &[f64], batch: &Self::Batch, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum NoiseModel {
    Exact,
    /// `∇u(θ) + τ·ζ` with `ζ ~ N(0, I)`.
    AdditiveNoise { tau: f64 },
    /// Minibatch mean over `batch` of the components, drawn without
    /// replacement.
    FiniteSum { batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradientBatch {
    Full,
    Noise(Vec<f64>),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct StochasticGradientModel {
    base: Arc<dyn Objective>,
    components: Vec<Arc<dyn Objective>>,
    mode: NoiseModel,
}

impl StochasticGradientModel {
    pub fn exact(base: Arc<dyn Objective>) -> Self {
        Self { base, components: Vec::new(), mode: NoiseModel::Exact }
    }

    pub fn additive_noise(base: Arc<dyn Objective>, tau: f64) -> Result<Self, ObjectiveError> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(ObjectiveError::Invalid(format!("noise scale {tau} must be >= 0")));
        }
        Ok(Self { base, components: Vec::new(), mode: NoiseModel::AdditiveNoise { tau } })
    }

    pub fn base(&self) -> &Arc<dyn Objective> {
        &self.base
    }

    pub fn mode(&self) -> NoiseModel {
        self.mode
    }

    pub fn sample_batch_with<R: Rng>(&self, rng: &mut R) -> GradientBatch {
        match self.mode {
            NoiseModel::Exact => GradientBatch::Full,
            NoiseModel::AdditiveNoise { tau } => GradientBatch::Noise(
                (0..self.base.dim()).map(|_| tau * rng.sample::<f64, _>(StandardNormal)).collect(),
            ),
            NoiseModel::FiniteSum { batch } => {
                let n = self.components.len();
                if batch >= n {
                    GradientBatch::Full
                } else {
                    let mut idx = index::sample(rng, n, batch).into_vec();
                    idx.sort_unstable();
                    GradientBatch::Indices(idx)
                }
            }
        }
    }

    pub fn gradient_on(&self, theta: &[f64], batch: &GradientBatch, out: &mut [f64]) {
        match batch {
            GradientBatch::Full => self.base.gradient_into(theta, out),
            GradientBatch::Noise(z) => {
                self.base.gradient_into(theta, out);
                for (o, zi) in out.iter_mut().zip(z) {
                    *o += zi;
                }
            }
            GradientBatch::Indices(idx) => {
                mean_gradient(&self.components, idx.iter().copied(), theta, out)
            }
        }
    }

    /// One stochastic gradient sample at `theta`.
    pub fn draw<R: Rng>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let batch = self.sample_batch_with(rng);
        let mut out = vec![0.0; self.base.dim()];
        self.gradient_on(theta, &batch, &mut out);
        out
    }
}

/// Finite-sum stochastic gradient model over `components` with minibatch
/// size `batch`.
pub fn make_finite_sum(
    components: Vec<Arc<dyn Objective>>,
    batch: usize,
) -> Result<StochasticGradientModel, ObjectiveError> {
    let sum = FiniteSum::new(components.clone())?;
    if batch == 0 || batch > components.len() {
        return Err(ObjectiveError::Invalid(format!(
            "minibatch size {batch} must be in 1..={}",
            components.len()
        )));
    }
    Ok(StochasticGradientModel {
        base: Arc::new(sum),
        components,
        mode: NoiseModel::FiniteSum { batch },
    })
}

impl StochasticGradient for StochasticGradientModel {
    type Batch = GradientBatch;

    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn sample_batch(&self, key: &StreamKey, step: u64) -> GradientBatch {
        match self.mode {
            NoiseModel::Exact => GradientBatch::Full,
            _ => self.sample_batch_with(&mut key.rng(step, Slot::Data)),
        }
    }

    fn gradient(&self, theta: &[f64], batch: &GradientBatch, out: &mut [f64]) {
        self.gradient_on(theta, batch, out);
    }
}

/// Axis-aligned box used by grid scans.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct GridBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl GridBox {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Regular lattice with `n` points per axis, first axis slowest.
    pub fn lattice(&self, n: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|k| linspace(self.lo[k], self.hi[k], n))
            .collect();
        match axes.len() {
            1 => axes[0].iter().map(|&x| vec![x]).collect(),
            2 => axes[0]
                .iter()
                .flat_map(|&x| axes[1].iter().map(move |&y| vec![x, y]))
                .collect(),
            _ => Vec::new(),
        }
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + h * i as f64 }).collect()
}

/// Numeric certificate for `⟨∇u(θ), θ⟩ ≥ a|θ|² − b` on a scanned box.
#[derive(Debug, Clone, Serialize)]
pub struct DissipativityEstimate {
    pub a_hat: f64,
    pub b_hat: f64,
    pub ball_radius: f64,
    pub domain: GridBox,
    pub resolution: usize,
    /// Grid-local minimizers of `u` found during the scan.
    pub minimizers: Vec<Vec<f64>>,
}

const DISSIPATIVITY_MARGIN: f64 = 1e-9;
const DISSIPATIVITY_B_CAP: f64 = 1e6;

/// Scans `domain` on a regular grid and certifies dissipativity.
///
/// Candidate `a` values are the dyadic ladder `2^-10 … 2^2`; for each one the
/// smallest valid `b` on the grid (plus a `1e-9` margin) is computed. Among
/// ladder values with `b ≤ 1e6` the one with the smallest minimizer ball
/// `sqrt(b/a)` is returned, ties going to the larger `a`.
pub fn estimate_dissipativity(
    obj: &dyn Objective,
    domain: &GridBox,
    resolution: usize,
) -> Result<DissipativityEstimate, ObjectiveError> {
    let d = obj.dim();
    if d > 2 || domain.dim() != d {
        return Err(ObjectiveError::UnsupportedDimension(d));
    }
    if resolution < 3 {
        return Err(ObjectiveError::Invalid("resolution must be >= 3".into()));
    }
    let points = domain.lattice(resolution);
    let mut g = vec![0.0; d];
    let mut scan: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    let mut values = Vec::with_capacity(points.len());
    for p in &points {
        obj.gradient_into(p, &mut g);
        scan.push((dot(p, p), dot(&g, p)));
        values.push(obj.value(p));
    }

    let mut best: Option<(f64, f64, f64)> = None;
    for e in (-10..=2).rev() {
        let a = 2f64.powi(e);
        let worst = scan.iter().fold(0.0f64, |m, &(r2, s)| m.max(a * r2 - s));
        let b = worst + DISSIPATIVITY_MARGIN;
        if !(b <= DISSIPATIVITY_B_CAP) {
            continue;
        }
        let radius = (b / a).sqrt();
        if best.is_none_or(|(_, _, r)| radius < r) {
            best = Some((a, b, radius));
        }
    }
    let (a_hat, b_hat, ball_radius) = best.ok_or(ObjectiveError::NoDissipativityCertificate)?;
    Ok(DissipativityEstimate {
        a_hat,
        b_hat,
        ball_radius,
        domain: domain.clone(),
        resolution,
        minimizers: grid_local_minima(&points, &values, d, resolution),
    })
}

fn grid_local_minima(points: &[Vec<f64>], values: &[f64], d: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    if d == 1 {
        for i in 1..n - 1 {
            if values[i] < values[i - 1] && values[i] <= values[i + 1] {
                out.push(points[i].clone());
            }
        }
    } else {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let v = values[i * n + j];
                let mut is_min = true;
                for di in [-1i64, 0, 1] {
                    for dj in [-1i64, 0, 1] {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let k = ((i as i64 + di) as usize) * n + (j as i64 + dj) as usize;
                        if values[k] < v {
                            is_min = false;
                        }
                    }
                }
                if is_min {
                    out.push(points[i * n + j].clone());
                }
            }
        }
    }
    out
}
