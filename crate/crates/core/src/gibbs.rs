//! Quadrature-normalized Gibbs measures on 1D and 2D lattices.
//!
//! Densities are stored as unnormalized log values at lattice nodes and are
//! interpreted as the piecewise-linear (1D) or bilinear (2D) interpolant of
//! the node densities. Integrals of that interpolant are exactly the
//! trapezoid rule, so normalization, region masses and sampling all agree.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objective::{linspace, GridBox, Objective, ObjectiveError};
use crate::rng::keyed_rng;
use crate::smoothing::v_value;
use crate::transport::{wp_assignment, SampleCloud};

#[derive(Debug, thiserror::Error)]
pub enum GibbsError {
    #[error("invalid gibbs request: {0}")]
    Invalid(String),
    #[error("domain too small: mass {edge_mass:e} within one cell of the boundary")]
    DomainTooSmall { edge_mass: f64 },
    #[error("resolution insufficient: only {cells} cells carry mass above 1e-300")]
    ResolutionInsufficient { cells: usize },
    #[error("measures live on different grids")]
    GridMismatch,
    #[error("non-finite energy at node {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl GibbsError {
    /// Whether this failure comes from a quadrature guard rather than bad input.
    pub fn is_guard(&self) -> bool {
        matches!(self, Self::DomainTooSmall { .. } | Self::ResolutionInsufficient { .. })
    }
}

pub const MIN_RESOLUTION: usize = 256;
const EDGE_MASS_GUARD: f64 = 1e-8;
const MAX_EXPANSIONS: usize = 3;
/// Number of independent batches a smoothed energy is split into.
pub const ENERGY_BATCHES: usize = 8;

/// Regular lattice with `n` nodes per axis over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: GridBox,
    pub n: usize,
}

impl GridSpec {
    pub fn new(domain: GridBox, n: usize) -> Self {
        Self { domain, n }
    }

    pub fn interval(lo: f64, hi: f64, n: usize) -> Self {
        Self::new(GridBox { lo: vec![lo], hi: vec![hi] }, n)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, k: usize) -> Vec<f64> {
        linspace(self.domain.lo[k], self.domain.hi[k], self.n)
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.domain.hi[k] - self.domain.lo[k]) / (self.n - 1) as f64
    }

    /// Nodes in storage order, first axis slowest.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        self.domain.lattice(self.n)
    }

    fn validate(&self) -> Result<(), GibbsError> {
        let d = self.dim();
        if d == 0 || d > 2 || self.domain.hi.len() != d {
            return Err(GibbsError::Invalid(format!("grid dimension {d} not in 1..=2")));
        }
        if self.n < MIN_RESOLUTION {
            return Err(GibbsError::Invalid(format!(
                "resolution {} below {MIN_RESOLUTION} per axis",
                self.n
            )));
        }
        for k in 0..d {
            let (lo, hi) = (self.domain.lo[k], self.domain.hi[k]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GibbsError::Invalid(format!("bad axis bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// The box doubled in width about its center.
    pub fn expanded(&self) -> Self {
        let mut domain = self.domain.clone();
        for k in 0..self.dim() {
            let c = 0.5 * (domain.lo[k] + domain.hi[k]);
            let r = domain.hi[k] - domain.lo[k];
            domain.lo[k] = c - r;
            domain.hi[k] = c + r;
        }
        Self { domain, n: self.n }
    }

    /// Trapezoid weights along one axis.
    fn axis_weights(&self, k: usize) -> Vec<f64> {
        let h = self.spacing(k);
        let mut w = vec![h; self.n];
        w[0] = 0.5 * h;
        w[self.n - 1] = 0.5 * h;
        w
    }

    /// `∫_a^b φ_i` for every hat function `φ_i` of axis `k`.
    fn hat_integrals(&self, k: usize, a: f64, b: f64) -> Vec<f64> {
        let x = self.axis(k);
        let h = self.spacing(k);
        let mut w = vec![0.0; self.n];
        for i in 0..self.n - 1 {
            let l = a.max(x[i]);
            let r = b.min(x[i + 1]);
            if l >= r {
                continue;
            }
            let (x0, x1) = (x[i], x[i + 1]);
            w[i] += ((x1 - l).powi(2) - (x1 - r).powi(2)) / (2.0 * h);
            w[i + 1] += ((r - x0).powi(2) - (l - x0).powi(2)) / (2.0 * h);
        }
        w
    }
}

/// Which energy the measure is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyKind {
    U,
    V { sigma: f64 },
    /// Monte-Carlo `g_ε` with one shared set of `n_mc` perturbations for all
    /// nodes.
    GEps { sigma: f64, n_mc: usize, seed: u64, antithetic: bool },
}

impl EnergyKind {
    pub fn sigma(&self) -> f64 {
        match *self {
            Self::U => 0.0,
            Self::V { sigma } | Self::GEps { sigma, .. } => sigma,
        }
    }
}

/// Node energies, plus per-batch estimates for Monte-Carlo energies.
#[derive(Debug, Clone)]
pub struct GridEnergies {
    pub mean: Vec<f64>,
    /// `ENERGY_BATCHES` vectors of node energies, each from a disjoint slice
    /// of the perturbation set.
    pub batches: Option<Vec<Vec<f64>>>,
}

pub fn grid_energies(
    obj: &dyn Objective,
    energy: &EnergyKind,
    grid: &GridSpec,
) -> Result<GridEnergies, GibbsError> {
    if obj.dim() != grid.dim() {
        return Err(ObjectiveError::DimensionMismatch { expected: obj.dim(), got: grid.dim() }.into());
    }
    let nodes = grid.nodes();
    let out = match *energy {
        EnergyKind::U => GridEnergies {
            mean: nodes.par_iter().map(|t| obj.value(t)).collect(),
            batches: None,
        },
        EnergyKind::V { sigma } => GridEnergies {
            mean: nodes.par_iter().map(|t| v_value(obj, t, sigma)).collect(),
            batches: None,
        },
        EnergyKind::GEps { sigma, n_mc, seed, antithetic } => {
            smoothed_energies(obj, &nodes, sigma, n_mc, seed, antithetic)?
        }
    };
    if let Some(i) = out.mean.iter().position(|e| !e.is_finite()) {
        return Err(GibbsError::NonFinite(i));
    }
    Ok(out)
}

fn smoothed_energies(
    obj: &dyn Objective,
    nodes: &[Vec<f64>],
    sigma: f64,
    n_mc: usize,
    seed: u64,
    antithetic: bool,
) -> Result<GridEnergies, GibbsError> {
    if n_mc < ENERGY_BATCHES || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(GibbsError::Invalid(format!(
            "g_eps energies need n_mc >= {ENERGY_BATCHES} and sigma >= 0"
        )));
    }
    let d = obj.dim();
    // Units are single draws, or antithetic pairs (ε, −ε).
    let units = if antithetic { n_mc / 2 } else { n_mc };
    let mut rng = keyed_rng(&[seed, 0x6765_7073]);
    let eps: Vec<f64> = (0..units * d).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let bounds: Vec<usize> = (0..=ENERGY_BATCHES).map(|b| b * units / ENERGY_BATCHES).collect();

    let per_node: Vec<[f64; ENERGY_BATCHES]> = nodes
        .par_iter()
        .map_init(
            || vec![0.0; d],
            |point, theta| {
                let mut sums = [0.0; ENERGY_BATCHES];
                for b in 0..ENERGY_BATCHES {
                    let mut s = 0.0;
                    for k in bounds[b]..bounds[b + 1] {
                        let e = &eps[k * d..(k + 1) * d];
                        for ((p, t), x) in point.iter_mut().zip(theta).zip(e) {
                            *p = t + x;
                        }
                        let mut val = obj.value(point);
                        if antithetic {
                            for ((p, t), x) in point.iter_mut().zip(theta).zip(e) {
                                *p = t - x;
                            }
                            val = 0.5 * (val + obj.value(point));
                        }
                        s += val;
                    }
                    sums[b] = s;
                }
                sums
            },
        )
        .collect();

    let mut mean = Vec::with_capacity(nodes.len());
    let mut batches = vec![Vec::with_capacity(nodes.len()); ENERGY_BATCHES];
    for sums in &per_node {
        mean.push(sums.iter().sum::<f64>() / units as f64);
        for b in 0..ENERGY_BATCHES {
            batches[b].push(sums[b] / (bounds[b + 1] - bounds[b]) as f64);
        }
    }
    Ok(GridEnergies { mean, batches: Some(batches) })
}

/// Gibbs density `∝ exp(−β E)` on a lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure {
    grid: GridSpec,
    /// `−β E` at each node.
    log_density_unnorm: Vec<f64>,
    log_z: f64,
    beta: f64,
    energy: EnergyKind,
}

/// Result of a region-mass query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionMass {
    pub mass: f64,
    /// The region does not meet the grid box.
    pub empty_intersection: bool,
}

/// Axis-aligned region; bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo], hi: vec![hi] }
    }
}

fn log_sum_exp_weighted(logs: &[f64], log_w: impl Fn(usize) -> f64) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().enumerate().map(|(i, &l)| (l - m + log_w(i)).exp()).sum();
    m + s.ln()
}

impl GridMeasure {
    /// Normalizes given node energies and applies the quadrature guards.
    pub fn from_energies(
        grid: GridSpec,
        energies: &[f64],
        beta: f64,
        energy: EnergyKind,
    ) -> Result<Self, GibbsError> {
        grid.validate()?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(GibbsError::Invalid(format!("beta {beta} must be positive and finite")));
        }
        if energies.len() != grid.len() {
            return Err(GibbsError::Invalid("energy count does not match grid".into()));
        }
        if let Some(i) = energies.iter().position(|e| !e.is_finite()) {
            return Err(GibbsError::NonFinite(i));
        }
        let log_density_unnorm: Vec<f64> = energies.iter().map(|e| -beta * e).collect();
        let weights = grid_weights(&grid);
        let log_z = log_sum_exp_weighted(&log_density_unnorm, |i| weights[i].ln());
        let m = Self { grid, log_density_unnorm, log_z, beta, energy };

        let density = m.density();
        let cells = density
            .iter()
            .zip(&weights)
            .filter(|(p, w)| *p * *w > 1e-300)
            .count();
        if cells < 3 {
            return Err(GibbsError::ResolutionInsufficient { cells });
        }
        let edge_mass = m.boundary_mass();
        if edge_mass > EDGE_MASS_GUARD {
            return Err(GibbsError::DomainTooSmall { edge_mass });
        }
        Ok(m)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn energy(&self) -> &EnergyKind {
        &self.energy
    }

    pub fn sigma(&self) -> f64 {
        self.energy.sigma()
    }

    pub fn log_density_unnorm(&self) -> &[f64] {
        &self.log_density_unnorm
    }

    /// Normalized log density at each node.
    pub fn log_density(&self) -> Vec<f64> {
        self.log_density_unnorm.iter().map(|l| l - self.log_z).collect()
    }

    /// Normalized density at each node.
    pub fn density(&self) -> Vec<f64> {
        self.log_density_unnorm.iter().map(|l| (l - self.log_z).exp()).collect()
    }

    /// Node quadrature masses `w_i p_i`; they sum to one.
    pub fn node_masses(&self) -> Vec<f64> {
        self.density().iter().zip(grid_weights(&self.grid)).map(|(p, w)| p * w).collect()
    }

    /// Mass of the cells that touch the boundary.
    pub fn boundary_mass(&self) -> f64 {
        let p = self.density();
        let n = self.grid.n;
        if self.dim() == 1 {
            let h = self.grid.spacing(0);
            0.5 * h * (p[0] + p[1] + p[n - 2] + p[n - 1])
        } else {
            let area = self.grid.spacing(0) * self.grid.spacing(1);
            let mut total = 0.0;
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    if i == 0 || j == 0 || i == n - 2 || j == n - 2 {
                        let s = p[i * n + j] + p[i * n + j + 1] + p[(i + 1) * n + j] + p[(i + 1) * n + j + 1];
                        total += 0.25 * area * s;
                    }
                }
            }
            total
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let masses = self.node_masses();
        let nodes = self.grid.nodes();
        (0..self.dim())
            .map(|k| nodes.iter().zip(&masses).map(|(x, m)| x[k] * m).sum())
            .collect()
    }

    /// Per-axis variances.
    pub fn variance(&self) -> Vec<f64> {
        let masses = self.node_masses();
        let nodes = self.grid.nodes();
        let mean = self.mean();
        (0..self.dim())
            .map(|k| nodes.iter().zip(&masses).map(|(x, m)| (x[k] - mean[k]).powi(2) * m).sum())
            .collect()
    }

    /// Node with the largest density.
    pub fn mode(&self) -> Vec<f64> {
        let i = self
            .log_density_unnorm
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
            .0;
        self.grid.nodes().swap_remove(i)
    }

    /// Exact mass of the interpolated density over an axis-aligned region.
    pub fn mass_in_region(&self, region: &Region) -> Result<RegionMass, GibbsError> {
        let d = self.dim();
        if region.lo.len() != d || region.hi.len() != d {
            return Err(GibbsError::Invalid("region dimension does not match measure".into()));
        }
        let dom = &self.grid.domain;
        let empty = (0..d).any(|k| {
            region.lo[k].max(dom.lo[k]) >= region.hi[k].min(dom.hi[k])
        });
        if empty {
            return Ok(RegionMass { mass: 0.0, empty_intersection: true });
        }
        let p = self.density();
        let wx = self.grid.hat_integrals(0, region.lo[0], region.hi[0]);
        let mass: f64 = if d == 1 {
            p.iter().zip(&wx).map(|(p, w)| p * w).sum()
        } else {
            let wy = self.grid.hat_integrals(1, region.lo[1], region.hi[1]);
            let n = self.grid.n;
            (0..n)
                .map(|i| wx[i] * (0..n).map(|j| p[i * n + j] * wy[j]).sum::<f64>())
                .sum()
        };
        Ok(RegionMass { mass: mass.clamp(0.0, 1.0), empty_intersection: false })
    }

    /// CDF table of a 1D measure.
    pub fn cdf_table(&self) -> Result<LinearCdf, GibbsError> {
        if self.dim() != 1 {
            return Err(GibbsError::Invalid("cdf is defined for 1D measures".into()));
        }
        Ok(LinearCdf::new(self.grid.axis(0), self.density()))
    }

    /// Independent draws from the interpolated density.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        if self.dim() == 1 {
            let cdf = LinearCdf::new(self.grid.axis(0), self.density());
            return (0..n).map(|_| vec![cdf.quantile(rng.random())]).collect();
        }
        let g = self.grid.n;
        let p = self.density();
        let wy = self.grid.axis_weights(1);
        let marginal: Vec<f64> = (0..g).map(|i| (0..g).map(|j| p[i * g + j] * wy[j]).sum()).collect();
        let xs = self.grid.axis(0);
        let ys = self.grid.axis(1);
        let hx = self.grid.spacing(0);
        let cdf_x = LinearCdf::new(xs.clone(), marginal);
        (0..n)
            .map(|_| {
                let x = cdf_x.quantile(rng.random());
                let i = (((x - xs[0]) / hx).floor() as usize).min(g - 2);
                let s = ((x - xs[i]) / hx).clamp(0.0, 1.0);
                let row: Vec<f64> = (0..g).map(|j| (1.0 - s) * p[i * g + j] + s * p[(i + 1) * g + j]).collect();
                let y = LinearCdf::new(ys.clone(), row).quantile(rng.random());
                vec![x, y]
            })
            .collect()
    }
}

fn grid_weights(grid: &GridSpec) -> Vec<f64> {
    let wx = grid.axis_weights(0);
    if grid.dim() == 1 {
        return wx;
    }
    let wy = grid.axis_weights(1);
    wx.iter().flat_map(|a| wy.iter().map(move |b| a * b)).collect()
}

/// CDF of a piecewise-linear density on sorted nodes, normalized by its
/// trapezoid total.
#[derive(Debug, Clone)]
pub struct LinearCdf {
    x: Vec<f64>,
    p: Vec<f64>,
    cum: Vec<f64>,
}

impl LinearCdf {
    pub fn new(x: Vec<f64>, p: Vec<f64>) -> Self {
        let mut cum = Vec::with_capacity(x.len());
        cum.push(0.0);
        for i in 0..x.len() - 1 {
            let c = cum[i] + 0.5 * (x[i + 1] - x[i]) * (p[i] + p[i + 1]);
            cum.push(c);
        }
        let total = cum[x.len() - 1];
        let p = p.into_iter().map(|v| v / total).collect();
        cum.iter_mut().for_each(|c| *c /= total);
        Self { x, p, cum }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return 0.0;
        }
        if t >= self.x[n - 1] {
            return 1.0;
        }
        let i = self.x.partition_point(|&v| v <= t) - 1;
        let h = self.x[i + 1] - self.x[i];
        let s = t - self.x[i];
        let (pa, pb) = (self.p[i], self.p[i + 1]);
        (self.cum[i] + pa * s + (pb - pa) * s * s / (2.0 * h)).min(1.0)
    }

    /// Inverse CDF by exact inversion of the quadratic within a cell.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = self.x.len();
        let u = u.clamp(0.0, 1.0);
        let i = (self.cum.partition_point(|&c| c <= u).max(1) - 1).min(n - 2);
        let h = self.x[i + 1] - self.x[i];
        let (pa, pb) = (self.p[i], self.p[i + 1]);
        let m = (u - self.cum[i]).max(0.0);
        let a2 = (pb - pa) / (2.0 * h);
        let disc = (pa * pa + 4.0 * a2 * m).max(0.0);
        let denom = pa + disc.sqrt();
        let t = if denom > 0.0 { 2.0 * m / denom } else { 0.0 };
        self.x[i] + t.clamp(0.0, h)
    }
}

/// Builds a Gibbs measure, doubling the box up to three times when the
/// boundary guard trips.
pub fn build_gibbs(
    obj: &dyn Objective,
    energy: &EnergyKind,
    beta: f64,
    grid: &GridSpec,
) -> Result<GridMeasure, GibbsError> {
    Ok(build_gibbs_with_energies(obj, energy, beta, grid)?.0)
}

/// As [`build_gibbs`], also returning the node energies actually used.
pub fn build_gibbs_with_energies(
    obj: &dyn Objective,
    energy: &EnergyKind,
    beta: f64,
    grid: &GridSpec,
) -> Result<(GridMeasure, GridEnergies), GibbsError> {
    grid.validate()?;
    let mut grid = grid.clone();
    let mut attempt = 0;
    loop {
        let e = grid_energies(obj, energy, &grid)?;
        match GridMeasure::from_energies(grid.clone(), &e.mean, beta, energy.clone()) {
            Ok(m) => return Ok((m, e)),
            Err(GibbsError::DomainTooSmall { .. }) if attempt < MAX_EXPANSIONS => {
                attempt += 1;
                grid = grid.expanded();
            }
            Err(err) => return Err(err),
        }
    }
}

/// `∫ p log(p/q)` by the trapezoid rule, clamped at zero.
pub fn kl(p: &GridMeasure, q: &GridMeasure) -> Result<f64, GibbsError> {
    if p.grid != q.grid {
        return Err(GibbsError::GridMismatch);
    }
    let lp = p.log_density();
    let lq = q.log_density();
    let w = grid_weights(&p.grid);
    let mut total = 0.0;
    for i in 0..lp.len() {
        let pi = lp[i].exp();
        if pi > 0.0 {
            total += w[i] * pi * (lp[i] - lq[i]);
        }
    }
    Ok(total.max(0.0))
}

const QUANTILE_POINTS: usize = 1 << 15;
const ASSIGNMENT_SAMPLES: usize = 512;

/// `W₂` between two grid measures: quantile coupling in 1D, and optimal
/// assignment between 512-point samples of each in 2D.
pub fn w2_between(p: &GridMeasure, q: &GridMeasure, seed: u64) -> Result<f64, GibbsError> {
    if p.dim() != q.dim() {
        return Err(GibbsError::GridMismatch);
    }
    if p.dim() == 1 {
        let (a, b) = (p.cdf_table()?, q.cdf_table()?);
        let sum: f64 = (0..QUANTILE_POINTS)
            .map(|i| {
                let t = (i as f64 + 0.5) / QUANTILE_POINTS as f64;
                (a.quantile(t) - b.quantile(t)).powi(2)
            })
            .sum();
        return Ok((sum / QUANTILE_POINTS as f64).sqrt());
    }
    let mut rng = keyed_rng(&[seed, 0x7732]);
    let a = SampleCloud::new(p.sample(ASSIGNMENT_SAMPLES, &mut rng))
        .map_err(|e| GibbsError::Invalid(e.to_string()))?;
    let b = SampleCloud::new(q.sample(ASSIGNMENT_SAMPLES, &mut rng))
        .map_err(|e| GibbsError::Invalid(e.to_string()))?;
    wp_assignment(&a, &b, 2).map_err(|e| GibbsError::Invalid(e.to_string()))
}

/// `KL(π_f ‖ π*)` through the normalizers:
/// `log(Z_* / Z_f) − β ∫ R dπ_f`, where `R = E_f − E_*` is supplied
/// pointwise. Both measures must share a grid.
pub fn kl_via_normalizers(
    pi_f: &GridMeasure,
    pi_star: &GridMeasure,
    remainder: impl Fn(&[f64]) -> f64,
) -> Result<f64, GibbsError> {
    if pi_f.grid != pi_star.grid || pi_f.beta != pi_star.beta {
        return Err(GibbsError::GridMismatch);
    }
    let masses = pi_f.node_masses();
    let nodes = pi_f.grid.nodes();
    let expected: f64 = nodes.iter().zip(&masses).map(|(t, m)| m * remainder(t)).sum();
    Ok(pi_star.log_z - pi_f.log_z - pi_f.beta * expected)
}

/// Lattice covering the nodes where `m`'s log density is within `log_drop`
/// of its maximum, padded by a quarter of the support width per side (at
/// least two original cells), with the same resolution.
pub fn zoom_grid(m: &GridMeasure, log_drop: f64) -> GridSpec {
    let d = m.dim();
    let n = m.grid.n;
    let ld = &m.log_density_unnorm;
    let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo_idx = vec![usize::MAX; d];
    let mut hi_idx = vec![0usize; d];
    for (flat, &l) in ld.iter().enumerate() {
        if l < max - log_drop {
            continue;
        }
        let idx = if d == 1 { vec![flat] } else { vec![flat / n, flat % n] };
        for k in 0..d {
            lo_idx[k] = lo_idx[k].min(idx[k]);
            hi_idx[k] = hi_idx[k].max(idx[k]);
        }
    }
    let mut domain = m.grid.domain.clone();
    for k in 0..d {
        let h = m.grid.spacing(k);
        let axis = m.grid.axis(k);
        let (a, b) = (axis[lo_idx[k]], axis[hi_idx[k]]);
        let pad = (0.25 * (b - a)).max(2.0 * h);
        domain.lo[k] = a - pad;
        domain.hi[k] = b + pad;
    }
    GridSpec { domain, n }
}

/// One row of a coupling sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub sigma: f64,
    pub kl: f64,
    pub w2: f64,
    /// Standard error of `kl` from the spread over energy batches.
    pub kl_err: f64,
    pub valid: bool,
    pub error: Option<String>,
    /// Whether the failure came from a quadrature guard.
    #[serde(skip)]
    pub guard_failure: bool,
}

/// Options for [`coupling_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub n_mc: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Re-grid each row onto the support of `π*` before comparing.
    pub zoom: bool,
}

/// For each `β`, compares `π_f ∝ exp(−β g_ε)` with `π* ∝ exp(−β v)` at
/// the coupled `σ = β^{−(1+η)/4}`. A failing row is marked invalid and the
/// sweep continues.
pub fn coupling_sweep(
    obj: &dyn Objective,
    betas: &[f64],
    eta: f64,
    grid: &GridSpec,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>, GibbsError> {
    if betas.len() < 3 {
        return Err(GibbsError::Invalid("coupling sweep needs at least 3 betas".into()));
    }
    if betas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(GibbsError::Invalid("betas must be strictly ascending".into()));
    }
    grid.validate()?;
    let rows = betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| match sweep_row(obj, beta, eta, grid, opts, i as u64) {
            Ok(row) => row,
            Err((sigma, e)) => SweepRow {
                beta,
                sigma,
                kl: f64::NAN,
                w2: f64::NAN,
                kl_err: f64::NAN,
                valid: false,
                guard_failure: e.is_guard(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(rows)
}

fn sweep_row(
    obj: &dyn Objective,
    beta: f64,
    eta: f64,
    grid: &GridSpec,
    opts: &SweepOptions,
    row: u64,
) -> Result<SweepRow, (f64, GibbsError)> {
    let sigma = crate::kernels::coupled_sigma(beta, eta)
        .map_err(|e| (f64::NAN, GibbsError::Invalid(e.to_string())))?;
    let fail = |e: GibbsError| (sigma, e);
    let v_kind = EnergyKind::V { sigma };
    let mut star = build_gibbs(obj, &v_kind, beta, grid).map_err(fail)?;
    if opts.zoom {
        star = build_gibbs(obj, &v_kind, beta, &zoom_grid(&star, 40.0)).map_err(fail)?;
    }
    let g_kind = EnergyKind::GEps {
        sigma,
        n_mc: opts.n_mc,
        seed: crate::rng::mix(&[opts.seed, row]),
        antithetic: opts.antithetic,
    };
    let fine = star.grid().clone();
    let energies = grid_energies(obj, &g_kind, &fine).map_err(fail)?;
    let pi_f = GridMeasure::from_energies(fine.clone(), &energies.mean, beta, g_kind.clone()).map_err(fail)?;
    let kl_full = kl(&pi_f, &star).map_err(fail)?;
    let mut kl_batches = Vec::with_capacity(ENERGY_BATCHES);
    for e in energies.batches.as_deref().unwrap_or_default() {
        let m = GridMeasure::from_energies(fine.clone(), e, beta, g_kind.clone()).map_err(fail)?;
        kl_batches.push(kl(&m, &star).map_err(fail)?);
    }
    let (_, kl_err) = crate::curvature::mean_and_se(&kl_batches);
    let w2 = w2_between(&pi_f, &star, crate::rng::mix(&[opts.seed, row, 2])).map_err(fail)?;
    Ok(SweepRow {
        beta,
        sigma,
        kl: kl_full,
        w2,
        kl_err,
        valid: true,
        error: None,
        guard_failure: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{DoubleWell, DoubleWell2d, Quadratic, Quartic};
    use std::f64::consts::PI;

    fn half_quadratic() -> Quadratic {
        Quadratic::diagonal(&[1.0]).unwrap()
    }

    #[test]
    fn gaussian_normalizer_and_variance() {
        let m = build_gibbs(&half_quadratic(), &EnergyKind::U, 4.0, &GridSpec::interval(-6.0, 6.0, 4096)).unwrap();
        let z = (2.0 * PI / 4.0).sqrt();
        assert!((m.log_z().exp() / z - 1.0).abs() < 1e-4);
        assert!((m.variance()[0] / 0.25 - 1.0).abs() < 1e-4);
        let total: f64 = m.node_masses().iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(m.density().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn v_energy_of_quadratic_is_a_shift() {
        let grid = GridSpec::interval(-6.0, 6.0, 1024);
        let a = build_gibbs(&half_quadratic(), &EnergyKind::U, 4.0, &grid).unwrap();
        let b = build_gibbs(&half_quadratic(), &EnergyKind::V { sigma: 0.5 }, 4.0, &grid).unwrap();
        for (x, y) in a.log_density().iter().zip(b.log_density()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let grid = GridSpec::interval(-4.0, 4.0, 512);
        let e: Vec<f64> = grid.nodes().iter().map(|t| t[0].powi(4) - t[0]).collect();
        let shifted: Vec<f64> = e.iter().map(|x| x + 123.4).collect();
        let a = GridMeasure::from_energies(grid.clone(), &e, 3.0, EnergyKind::U).unwrap();
        let b = GridMeasure::from_energies(grid, &shifted, 3.0, EnergyKind::U).unwrap();
        for (x, y) in a.density().iter().zip(b.density()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn guards() {
        let q = half_quadratic();
        let err = GridMeasure::from_energies(
            GridSpec::interval(-1.0, 1.0, 256),
            &GridSpec::interval(-1.0, 1.0, 256).nodes().iter().map(|t| 0.5 * t[0] * t[0]).collect::<Vec<_>>(),
            1.0,
            EnergyKind::U,
        )
        .unwrap_err();
        assert!(matches!(err, GibbsError::DomainTooSmall { .. }));
        // Auto-expansion recovers: [-1, 1] → [-8, 8] after three doublings.
        let m = build_gibbs(&q, &EnergyKind::U, 1.0, &GridSpec::interval(-1.0, 1.0, 256)).unwrap();
        assert_eq!(m.grid().domain.hi[0], 8.0);
        let err = build_gibbs(&q, &EnergyKind::U, 1e9, &GridSpec::interval(-6.0, 6.0, 256)).unwrap_err();
        assert!(matches!(err, GibbsError::ResolutionInsufficient { .. }));
        assert!(build_gibbs(&q, &EnergyKind::U, 1.0, &GridSpec::interval(-6.0, 6.0, 100)).is_err());
        assert!(build_gibbs(&q, &EnergyKind::U, -1.0, &GridSpec::interval(-6.0, 6.0, 256)).is_err());
    }

    #[test]
    fn kl_examples() {
        let grid = GridSpec::interval(-10.0, 10.0, 4096);
        let a = build_gibbs(&half_quadratic(), &EnergyKind::U, 1.0, &grid).unwrap();
        let b = build_gibbs(&half_quadratic(), &EnergyKind::U, 2.0, &grid).unwrap();
        assert_eq!(kl(&a, &a).unwrap(), 0.0);
        let exact = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl(&a, &b).unwrap() - exact).abs() < 1e-4);
        let other = build_gibbs(&half_quadratic(), &EnergyKind::U, 1.0, &GridSpec::interval(-9.0, 9.0, 4096)).unwrap();
        assert!(matches!(kl(&a, &other), Err(GibbsError::GridMismatch)));
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let grid = GridSpec::interval(-5.0, 5.0, 256);
        let mut rng = keyed_rng(&[51]);
        for _ in 0..100 {
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let energy = |c: &[f64]| -> Vec<f64> {
                grid.nodes().iter().map(|t| {
                    let x = t[0];
                    x.powi(4) + c[0] * x.powi(3) + c[1] * x * x + c[2] * x + c[3]
                }).collect()
            };
            let p = GridMeasure::from_energies(grid.clone(), &energy(&c), 2.0, EnergyKind::U).unwrap();
            let q = GridMeasure::from_energies(grid.clone(), &energy(&d), 2.0, EnergyKind::U).unwrap();
            assert!(kl(&p, &q).unwrap() >= 0.0);
            assert_eq!(kl(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn region_masses() {
        let w = DoubleWell::new(0.0, 0.05).unwrap();
        let m = build_gibbs(&w, &EnergyKind::U, 5.0, &GridSpec::interval(-3.0, 3.0, 2048)).unwrap();
        let right = m.mass_in_region(&Region::interval(0.0, f64::INFINITY)).unwrap();
        assert!((right.mass - 0.5).abs() < 1e-6);
        let all = m.mass_in_region(&Region::interval(f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        assert!((all.mass - 1.0).abs() < 1e-10);
        let none = m.mass_in_region(&Region::interval(10.0, 11.0)).unwrap();
        assert_eq!(none, RegionMass { mass: 0.0, empty_intersection: true });
    }

    #[test]
    fn region_mass_2d_symmetry() {
        let w = DoubleWell2d::new(0.0, 0.05).unwrap();
        let m = build_gibbs(&w, &EnergyKind::U, 3.0, &GridSpec::new(GridBox::cube(2, -3.0, 3.0), 256)).unwrap();
        let q = m.mass_in_region(&Region { lo: vec![0.0, 0.0], hi: vec![10.0, 10.0] }).unwrap();
        assert!((q.mass - 0.25).abs() < 1e-6);
        let all = m.mass_in_region(&Region { lo: vec![-10.0; 2], hi: vec![10.0; 2] }).unwrap();
        assert!((all.mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cdf_and_quantile_are_inverse() {
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let m = build_gibbs(&w, &EnergyKind::U, 3.0, &GridSpec::interval(-3.0, 3.0, 512)).unwrap();
        let cdf = m.cdf_table().unwrap();
        for i in 1..100 {
            let t = i as f64 / 100.0;
            assert!((cdf.eval(cdf.quantile(t)) - t).abs() < 1e-10);
        }
        let split = m.mass_in_region(&Region::interval(f64::NEG_INFINITY, 0.3)).unwrap().mass;
        assert!((cdf.eval(0.3) - split).abs() < 1e-12);
    }

    #[test]
    fn sampling_matches_moments() {
        let mut rng = keyed_rng(&[52]);
        let m = build_gibbs(&half_quadratic(), &EnergyKind::U, 4.0, &GridSpec::interval(-6.0, 6.0, 2048)).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = m.sample(n, &mut rng).into_iter().map(|x| x[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // SE of the sample variance of a Gaussian is var·sqrt(2/n).
        assert!((var - 0.25).abs() <= 4.0 * 0.25 * (2.0 / n as f64).sqrt());
        assert!(mean.abs() <= 4.0 * (0.25 / n as f64).sqrt());

        let sharp = build_gibbs(&half_quadratic(), &EnergyKind::U, 1e5, &GridSpec::interval(-6.0, 6.0, 257)).unwrap();
        let h = sharp.grid().spacing(0);
        assert!(sharp.sample(1000, &mut rng).iter().all(|x| x[0].abs() <= h));
    }

    #[test]
    fn sampled_basin_fraction_matches_mass() {
        let mut rng = keyed_rng(&[53]);
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let m = build_gibbs(&w, &EnergyKind::U, 4.0, &GridSpec::interval(-3.0, 3.0, 1024)).unwrap();
        let p = m.mass_in_region(&Region::interval(f64::NEG_INFINITY, 0.0)).unwrap().mass;
        let n = 100_000;
        let hits = m.sample(n, &mut rng).iter().filter(|x| x[0] < 0.0).count() as f64 / n as f64;
        assert!((hits - p).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn sampling_2d_matches_moments() {
        let mut rng = keyed_rng(&[54]);
        let q = Quadratic::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let m = build_gibbs(&q, &EnergyKind::U, 2.0, &GridSpec::new(GridBox::cube(2, -5.0, 5.0), 256)).unwrap();
        let n = 50_000;
        let s = m.sample(n, &mut rng);
        let var = m.variance();
        for k in 0..2 {
            let mean = s.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let v = s.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((v - var[k]).abs() <= 4.0 * var[k] * (2.0 / n as f64).sqrt(), "axis {k}: {v} vs {}", var[k]);
        }
    }

    #[test]
    fn flat_well_mode_under_v() {
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let grid = GridSpec::interval(-3.0, 3.0, 4096);
        let m = build_gibbs(&w, &EnergyKind::V { sigma: 0.3 }, 200.0, &grid).unwrap();
        // Dense arg-min oracle on the same box.
        let n = 1_000_001;
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 0..n {
            let x = -3.0 + 6.0 * i as f64 / (n - 1) as f64;
            let v = w.value_at(x) + 0.045 * w.second(x);
            if v < best {
                best = v;
                arg = x;
            }
        }
        assert!(arg < 0.0);
        assert!((m.mode()[0] - arg).abs() <= grid.spacing(0));
    }

    #[test]
    fn quadratic_sweep_has_zero_kl() {
        let q = half_quadratic();
        // Antithetic pairs cancel the odd part of the Monte-Carlo error; the
        // even part of a quadratic is a constant, so the energies differ from
        // v by a constant exactly.
        let opts = SweepOptions { n_mc: 4000, seed: 5, antithetic: true, zoom: true };
        let rows = coupling_sweep(&q, &[10.0, 100.0, 1000.0], 0.01, &GridSpec::interval(-6.0, 6.0, 512), &opts).unwrap();
        for r in &rows {
            assert!(r.valid, "{r:?}");
            assert!(r.kl < 1e-10 && r.w2 < 1e-6, "{r:?}");
        }
        assert!(coupling_sweep(&q, &[10.0, 100.0], 0.01, &GridSpec::interval(-6.0, 6.0, 512), &opts).is_err());
        assert!(coupling_sweep(&q, &[100.0, 10.0, 1000.0], 0.01, &GridSpec::interval(-6.0, 6.0, 512), &opts).is_err());
    }

    #[test]
    fn sweep_rows_fail_independently() {
        let q = half_quadratic();
        let opts = SweepOptions { n_mc: 64, seed: 5, antithetic: false, zoom: false };
        let rows = coupling_sweep(&q, &[2.0, 10.0, 1e12], 0.01, &GridSpec::interval(-6.0, 6.0, 256), &opts).unwrap();
        assert!(rows[0].valid && rows[1].valid);
        assert!(!rows[2].valid && rows[2].guard_failure);
    }

    #[test]
    fn two_path_kl_on_double_well() {
        let w = DoubleWell::new(0.3, 0.05).unwrap();
        let beta = 1e3;
        let sigma = crate::kernels::coupled_sigma(beta, 0.01).unwrap();
        let coarse = build_gibbs(&w, &EnergyKind::V { sigma }, beta, &GridSpec::interval(-3.0, 3.0, 1024)).unwrap();
        let grid = zoom_grid(&coarse, 40.0);
        let star = build_gibbs(&w, &EnergyKind::V { sigma }, beta, &grid).unwrap();
        let kind = EnergyKind::GEps { sigma, n_mc: 400_000, seed: 17, antithetic: true };
        let (f, energies) = build_gibbs_with_energies(&w, &kind, beta, &grid).unwrap();
        assert_eq!(f.grid, star.grid);
        // g_ε − v beyond fourth order is the constant 15cσ⁶ for this polynomial.
        let remainder = |t: &[f64]| {
            crate::smoothing::remainder_expectation(&w, t, sigma).unwrap() + 15.0 * 0.05 * sigma.powi(6)
        };
        let direct = kl(&f, &star).unwrap();
        let via = kl_via_normalizers(&f, &star, remainder).unwrap();
        // The two paths differ by β ∫ (ĝ − v − R) dπ_f; its MC error comes
        // from the spread over energy batches.
        let v = grid_energies(&w, &EnergyKind::V { sigma }, &grid).unwrap().mean;
        let masses = f.node_masses();
        let nodes = grid.nodes();
        let gaps: Vec<f64> = energies
            .batches
            .unwrap()
            .iter()
            .map(|g| (0..nodes.len()).map(|i| masses[i] * (g[i] - v[i] - remainder(&nodes[i]))).sum())
            .collect();
        let (_, se) = crate::curvature::mean_and_se(&gaps);
        assert!(direct < 1e-3, "{direct}");
        assert!((direct - via).abs() <= 4.0 * beta * se, "{direct} vs {via}, tolerance {}", 4.0 * beta * se);
    }

    #[test]
    fn two_path_kl_on_quartic() {
        // E = x⁴ has g_ε − v = 3σ⁴ exactly, so both paths must give zero.
        let sigma = 0.3;
        let beta = 5.0;
        let grid = GridSpec::interval(-3.0, 3.0, 1024);
        let star = build_gibbs(&Quartic, &EnergyKind::V { sigma }, beta, &grid).unwrap();
        let kind = EnergyKind::GEps { sigma, n_mc: 200_000, seed: 9, antithetic: true };
        let f = build_gibbs(&Quartic, &kind, beta, &grid).unwrap();
        let direct = kl(&f, &star).unwrap();
        let r4 = 3.0 * sigma.powi(4);
        let via = kl_via_normalizers(&f, &star, |_| r4).unwrap();
        assert!(direct < 1e-4, "{direct}");
        assert!((direct - via).abs() < 5e-3, "{direct} vs {via}");
    }
}
