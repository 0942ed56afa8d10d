//! Small tanh MLP on noisy-label half-moons, used to compare samplers on
//! accuracy and curvature of the final iterate.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{hutchinson_trace, lanczos_topk, LanczosOptions};
use crate::kernels::{
    couple_beta_sigma, run_chain, ChainSpec, KernelConfig, KernelError,
};
use crate::objective::StochasticGradient;
use crate::rng::{keyed_rng, mix, Slot, StreamKey};

#[derive(Debug, thiserror::Error)]
pub enum NetlabError {
    #[error("invalid netlab request: {0}")]
    Invalid(String),
    #[error("non-finite loss on batch {fingerprint:016x}")]
    NonFinite { fingerprint: u64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Curvature(#[from] crate::curvature::CurvatureError),
}

/// Half-moons with train labels flipped independently at rate `rho`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisyDataset {
    pub train_x: Vec<[f64; 2]>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<[f64; 2]>,
    pub test_y: Vec<usize>,
    pub rho: f64,
    pub seed: u64,
    pub flipped_mask: Vec<bool>,
}

const JITTER: f64 = 0.15;

fn moon_point<R: Rng>(label: usize, rng: &mut R) -> [f64; 2] {
    let t = rng.random_range(0.0..std::f64::consts::PI);
    let (x, y) = if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    // Centered so the point cloud straddles the origin.
    [
        x - 0.5 + JITTER * rng.sample::<f64, _>(StandardNormal),
        y - 0.25 + JITTER * rng.sample::<f64, _>(StandardNormal),
    ]
}

/// Interleaved classes: row `i` has clean label `i mod 2`.
pub fn make_dataset(n_train: usize, n_test: usize, rho: f64, seed: u64) -> Result<NoisyDataset, NetlabError> {
    if !(0.0..0.5).contains(&rho) {
        return Err(NetlabError::Invalid(format!("flip rate {rho} not in [0, 0.5)")));
    }
    if n_train == 0 || n_test == 0 {
        return Err(NetlabError::Invalid("dataset sizes must be positive".into()));
    }
    let mut rng = keyed_rng(&[seed, 0x6461_7461]);
    let mut train_x = Vec::with_capacity(n_train);
    let mut train_y = Vec::with_capacity(n_train);
    let mut flipped_mask = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let clean = i % 2;
        train_x.push(moon_point(clean, &mut rng));
        let flip = rng.random::<f64>() < rho;
        flipped_mask.push(flip);
        train_y.push(if flip { 1 - clean } else { clean });
    }
    let test_x = (0..n_test).map(|i| moon_point(i % 2, &mut rng)).collect();
    let test_y = (0..n_test).map(|i| i % 2).collect();
    Ok(NoisyDataset { train_x, train_y, test_x, test_y, rho, seed, flipped_mask })
}

impl NoisyDataset {
    /// Moves the last `n_val` training rows into a held-out set (with their
    /// possibly flipped labels).
    pub fn split_validation(&self, n_val: usize) -> Result<(NoisyDataset, Vec<[f64; 2]>, Vec<usize>), NetlabError> {
        if n_val == 0 || n_val >= self.train_x.len() {
            return Err(NetlabError::Invalid("validation size out of range".into()));
        }
        let k = self.train_x.len() - n_val;
        let mut ds = self.clone();
        let val_x = ds.train_x.split_off(k);
        let val_y = ds.train_y.split_off(k);
        ds.flipped_mask.truncate(k);
        Ok((ds, val_x, val_y))
    }
}

pub const INPUT: usize = 2;
pub const HIDDEN: usize = 16;
pub const CLASSES: usize = 2;
/// Flat parameter count of the 2-16-16-2 network.
pub const N_PARAMS: usize = HIDDEN * INPUT + HIDDEN + HIDDEN * HIDDEN + HIDDEN + CLASSES * HIDDEN + CLASSES;

// Offsets into the flat vector: W1, b1, W2, b2, W3, b3, weights row-major
// (output index slowest).
const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUT;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + CLASSES * HIDDEN;

/// Layer views of a flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Layers<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub w3: &'a [f64],
    pub b3: &'a [f64],
}

pub fn split_params(p: &[f64]) -> Layers<'_> {
    assert_eq!(p.len(), N_PARAMS);
    Layers {
        w1: &p[W1..B1],
        b1: &p[B1..W2],
        w2: &p[W2..B2],
        b2: &p[B2..W3],
        w3: &p[W3..B3],
        b3: &p[B3..],
    }
}

pub fn join_params(l: &Layers<'_>) -> Vec<f64> {
    [l.w1, l.b1, l.w2, l.b2, l.w3, l.b3].concat()
}

/// Weights `N(0, 1/fan_in)`, zero biases.
pub fn init_params<R: Rng>(rng: &mut R) -> Vec<f64> {
    let mut p = vec![0.0; N_PARAMS];
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
        let s = (1.0 / fan_in as f64).sqrt();
        for x in &mut p[range] {
            *x = s * rng.sample::<f64, _>(StandardNormal);
        }
    };
    fill(W1..B1, INPUT);
    fill(W2..B2, HIDDEN);
    fill(W3..B3, HIDDEN);
    p
}

struct Activations {
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    z: [f64; CLASSES],
}

fn forward(l: &Layers<'_>, x: &[f64; 2]) -> Activations {
    let mut h1 = [0.0; HIDDEN];
    for i in 0..HIDDEN {
        h1[i] = (l.w1[i * INPUT] * x[0] + l.w1[i * INPUT + 1] * x[1] + l.b1[i]).tanh();
    }
    let mut h2 = [0.0; HIDDEN];
    for i in 0..HIDDEN {
        let row = &l.w2[i * HIDDEN..(i + 1) * HIDDEN];
        let s: f64 = row.iter().zip(&h1).map(|(w, h)| w * h).sum();
        h2[i] = (s + l.b2[i]).tanh();
    }
    let mut z = [0.0; CLASSES];
    for c in 0..CLASSES {
        let row = &l.w3[c * HIDDEN..(c + 1) * HIDDEN];
        z[c] = row.iter().zip(&h2).map(|(w, h)| w * h).sum::<f64>() + l.b3[c];
    }
    Activations { h1, h2, z }
}

fn softmax_xent(z: &[f64; CLASSES], y: usize) -> (f64, [f64; CLASSES]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; CLASSES];
    let mut s = 0.0;
    for c in 0..CLASSES {
        e[c] = (z[c] - m).exp();
        s += e[c];
    }
    let loss = m + s.ln() - z[y];
    for c in 0..CLASSES {
        e[c] /= s;
    }
    (loss, e)
}

/// Predicted class for one input.
pub fn predict(params: &[f64], x: &[f64; 2]) -> usize {
    let a = forward(&split_params(params), x);
    usize::from(a.z[1] > a.z[0])
}

pub fn accuracy(params: &[f64], xs: &[[f64; 2]], ys: &[usize]) -> f64 {
    let hits = xs.iter().zip(ys).filter(|(x, &y)| predict(params, x) == y).count();
    hits as f64 / xs.len() as f64
}

fn fingerprint(rows: &[usize]) -> u64 {
    let words: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
    mix(&words)
}

/// Weighted mean cross-entropy over `rows` and its gradient.
///
/// `weights`, when given, pairs with `rows`; the loss is
/// `Σ w_i ℓ_i / Σ w_i`.
pub fn loss_and_grad(
    params: &[f64],
    xs: &[[f64; 2]],
    ys: &[usize],
    rows: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>), NetlabError> {
    let mut grad = vec![0.0; N_PARAMS];
    let loss = loss_and_grad_into(params, xs, ys, rows, weights, &mut grad)?;
    Ok((loss, grad))
}

pub fn loss_and_grad_into(
    params: &[f64],
    xs: &[[f64; 2]],
    ys: &[usize],
    rows: &[usize],
    weights: Option<&[f64]>,
    grad: &mut [f64],
) -> Result<f64, NetlabError> {
    if rows.is_empty() {
        return Err(NetlabError::Invalid("batch must be nonempty".into()));
    }
    if weights.is_some_and(|w| w.len() != rows.len()) {
        return Err(NetlabError::Invalid("weights must pair with rows".into()));
    }
    let l = split_params(params);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let total_w: f64 = weights.map_or(rows.len() as f64, |w| w.iter().sum());
    let mut loss = 0.0;
    for (k, &r) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]) / total_w;
        let x = &xs[r];
        let a = forward(&l, x);
        let (li, prob) = softmax_xent(&a.z, ys[r]);
        loss += w * li;

        let mut dz = prob;
        dz[ys[r]] -= 1.0;
        let mut dh2 = [0.0; HIDDEN];
        for c in 0..CLASSES {
            let g = w * dz[c];
            grad[B3 + c] += g;
            for j in 0..HIDDEN {
                grad[W3 + c * HIDDEN + j] += g * a.h2[j];
                dh2[j] += l.w3[c * HIDDEN + j] * dz[c];
            }
        }
        let mut dh1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let da = dh2[i] * (1.0 - a.h2[i] * a.h2[i]);
            let g = w * da;
            grad[B2 + i] += g;
            for j in 0..HIDDEN {
                grad[W2 + i * HIDDEN + j] += g * a.h1[j];
                dh1[j] += l.w2[i * HIDDEN + j] * da;
            }
        }
        for i in 0..HIDDEN {
            let g = w * dh1[i] * (1.0 - a.h1[i] * a.h1[i]);
            grad[B1 + i] += g;
            grad[W1 + i * INPUT] += g * x[0];
            grad[W1 + i * INPUT + 1] += g * x[1];
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NetlabError::NonFinite { fingerprint: fingerprint(rows) });
    }
    Ok(loss)
}

/// Minibatch gradient oracle: each epoch is a fresh permutation of the
/// training rows, split into consecutive batches; a trailing partial batch
/// is dropped.
#[derive(Debug, Clone)]
pub struct MlpOracle<'a> {
    xs: &'a [[f64; 2]],
    ys: &'a [usize],
    batch: usize,
}

impl<'a> MlpOracle<'a> {
    pub fn new(xs: &'a [[f64; 2]], ys: &'a [usize], batch: usize) -> Result<Self, NetlabError> {
        if batch == 0 || batch > xs.len() || xs.len() != ys.len() {
            return Err(NetlabError::Invalid("batch size out of range".into()));
        }
        Ok(Self { xs, ys, batch })
    }

    fn batches_per_epoch(&self) -> u64 {
        (self.xs.len() / self.batch) as u64
    }
}

impl StochasticGradient for MlpOracle<'_> {
    type Batch = Vec<usize>;

    fn dim(&self) -> usize {
        N_PARAMS
    }

    fn sample_batch(&self, key: &StreamKey, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let mut perm: Vec<usize> = (0..self.xs.len()).collect();
        perm.shuffle(&mut key.rng(step / per, Slot::Epoch));
        let start = (step % per) as usize * self.batch;
        perm[start..start + self.batch].to_vec()
    }

    fn gradient(&self, theta: &[f64], batch: &Vec<usize>, out: &mut [f64]) {
        // A non-finite loss surfaces as a non-finite iterate, which the
        // kernel reports as divergence.
        if loss_and_grad_into(theta, self.xs, self.ys, batch, None, out).is_err() {
            out.iter_mut().for_each(|g| *g = f64::NAN);
        }
    }
}

/// Sampler variants compared on the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKernel {
    Sgd,
    Sgld,
    FsgldCoupled,
    FsgldFixed,
    Rwp,
    Sam,
}

impl NetKernel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sgld => "sgld",
            Self::FsgldCoupled => "fsgld-coupled",
            Self::FsgldFixed => "fsgld-fixed",
            Self::Rwp => "rwp",
            Self::Sam => "sam",
        }
    }

    /// Whether the variant has a perturbation scale to tune.
    pub fn is_tuned(self) -> bool {
        matches!(self, Self::Sgld | Self::FsgldCoupled | Self::FsgldFixed | Self::Rwp)
    }

    /// Sampler for a given scale. For SGLD the scale only sets the
    /// temperature, through the same coupling as the coupled variant.
    pub fn config(self, p: &NetlabParams, sigma: f64) -> Result<KernelConfig, NetlabError> {
        let cfg = match self {
            Self::Sgd => KernelConfig::sgd(p.step_size),
            Self::Sgld => KernelConfig::sgld(p.step_size, couple_beta_sigma(sigma, p.eta)?),
            Self::FsgldCoupled => KernelConfig::fsgld_coupled(p.step_size, sigma, p.eta)?,
            Self::FsgldFixed => KernelConfig::fsgld(p.step_size, FIXED_BETA, sigma),
            Self::Rwp => KernelConfig::rwp_sgd(p.step_size, sigma),
            Self::Sam => KernelConfig::sam(p.step_size, p.sam_radius),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for NetKernel {
    type Err = NetlabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "sgd" => Self::Sgd,
            "sgld" => Self::Sgld,
            "fsgld-coupled" | "fsgld" => Self::FsgldCoupled,
            "fsgld-fixed" => Self::FsgldFixed,
            "rwp" | "rwp-sgd" => Self::Rwp,
            "sam" => Self::Sam,
            other => return Err(NetlabError::Invalid(format!("unknown kernel {other:?}"))),
        })
    }
}

/// Inverse temperature of the fixed-temperature variant.
pub const FIXED_BETA: f64 = 1e14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetlabParams {
    pub n_train: usize,
    pub n_test: usize,
    /// Rows held out of training for scale selection.
    pub n_val: usize,
    pub rho: f64,
    pub data_seed: u64,
    pub step_size: f64,
    pub eta: f64,
    pub sam_radius: f64,
    pub sigma_grid: Vec<f64>,
    pub n_steps: u64,
    pub batch: usize,
    pub hutchinson_m: usize,
    /// Training rows used for curvature diagnostics.
    pub curvature_rows: usize,
}

impl Default for NetlabParams {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 2000,
            n_val: 400,
            rho: 0.2,
            data_seed: 0,
            step_size: 0.05,
            eta: 0.01,
            sam_radius: 0.05,
            sigma_grid: log_grid(1e-3, 1e-2, 5),
            n_steps: 20_000,
            batch: 64,
            hutchinson_m: 1000,
            curvature_rows: 1000,
        }
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub kernel: String,
    pub seed: u64,
    pub sigma: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub trace: f64,
    pub trace_se: f64,
    pub lambda_max: f64,
    pub grad_evals: u64,
    pub valid: bool,
    pub error: Option<String>,
}

/// Trains from the seed's shared initialization and data order.
pub fn train(
    train_x: &[[f64; 2]],
    train_y: &[usize],
    cfg: &KernelConfig,
    p: &NetlabParams,
    seed: u64,
) -> Result<(Vec<f64>, u64), NetlabError> {
    let oracle = MlpOracle::new(train_x, train_y, p.batch)?;
    let init = init_params(&mut keyed_rng(&[seed, 0x696e_6974]));
    let spec = ChainSpec::new(p.n_steps, p.n_steps.saturating_sub(1), 1);
    let traj = run_chain(&init, cfg, &oracle, &spec, seed, 0)?;
    Ok((traj.final_state, traj.grad_evals))
}

/// Hutchinson trace and top eigenvalue of the training loss on the first
/// `curvature_rows` training rows.
pub fn curvature_at(
    params: &[f64],
    train_x: &[[f64; 2]],
    train_y: &[usize],
    p: &NetlabParams,
    seed: u64,
) -> Result<(f64, f64, f64), NetlabError> {
    let rows: Vec<usize> = (0..p.curvature_rows.min(train_x.len())).collect();
    let grad = |t: &[f64]| {
        loss_and_grad(t, train_x, train_y, &rows, None)
            .map(|(_, g)| g)
            .unwrap_or_else(|_| vec![f64::NAN; N_PARAMS])
    };
    let hvp = |v: &[f64]| {
        crate::curvature::hvp_fd(grad, params, v).unwrap_or_else(|_| vec![f64::NAN; N_PARAMS])
    };
    let tr = hutchinson_trace(hvp, N_PARAMS, p.hutchinson_m, mix(&[seed, 0x7472]))?;
    let top = lanczos_topk(hvp, N_PARAMS, 1, LanczosOptions::default(), mix(&[seed, 0x6c7a]))?;
    Ok((tr.mean, tr.se, top.eigenvalues[0]))
}

/// Full train-evaluate-diagnose pipeline for one (kernel, scale, seed).
pub fn run_row(
    ds: &NoisyDataset,
    kernel: NetKernel,
    sigma: f64,
    p: &NetlabParams,
    seed: u64,
) -> RunRow {
    let mut row = RunRow {
        kernel: kernel.name().to_string(),
        seed,
        sigma: if kernel == NetKernel::Sgd || kernel == NetKernel::Sam { 0.0 } else { sigma },
        test_acc: f64::NAN,
        train_loss: f64::NAN,
        trace: f64::NAN,
        trace_se: f64::NAN,
        lambda_max: f64::NAN,
        grad_evals: 0,
        valid: false,
        error: None,
    };
    let result = (|| {
        let cfg = kernel.config(p, sigma)?;
        let (params, evals) = train(&ds.train_x, &ds.train_y, &cfg, p, seed)?;
        row.grad_evals = evals;
        let all: Vec<usize> = (0..ds.train_x.len()).collect();
        row.train_loss = loss_and_grad(&params, &ds.train_x, &ds.train_y, &all, None)?.0;
        row.test_acc = accuracy(&params, &ds.test_x, &ds.test_y);
        let (tr, se, top) = curvature_at(&params, &ds.train_x, &ds.train_y, p, seed)?;
        row.trace = tr;
        row.trace_se = se;
        row.lambda_max = top;
        Ok::<_, NetlabError>(())
    })();
    match result {
        Ok(()) => row.valid = true,
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Picks the scale with the best held-out accuracy (ties to the smaller
/// scale), training on the reduced set with `tune_seed`.
pub fn select_sigma(
    ds: &NoisyDataset,
    kernel: NetKernel,
    p: &NetlabParams,
    tune_seed: u64,
) -> Result<(f64, Vec<(f64, f64)>), NetlabError> {
    if p.sigma_grid.is_empty() {
        return Err(NetlabError::Invalid("empty sigma grid".into()));
    }
    let (reduced, val_x, val_y) = ds.split_validation(p.n_val)?;
    let scores: Vec<(f64, f64)> = p
        .sigma_grid
        .par_iter()
        .map(|&s| {
            let acc = kernel
                .config(p, s)
                .and_then(|cfg| train(&reduced.train_x, &reduced.train_y, &cfg, p, tune_seed))
                .map(|(params, _)| accuracy(&params, &val_x, &val_y))
                .unwrap_or(f64::NEG_INFINITY);
            (s, acc)
        })
        .collect();
    let best = scores
        .iter()
        .fold(scores[0], |b, &c| if c.1 > b.1 { c } else { b });
    Ok((best.0, scores))
}

/// Per-kernel aggregate over valid seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSummary {
    pub kernel: String,
    pub sigma: f64,
    pub valid_runs: usize,
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub trace_mean: f64,
    pub trace_std: f64,
    pub lambda_max_mean: f64,
    pub lambda_max_std: f64,
    pub grad_evals_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<RunRow>,
    pub summaries: Vec<KernelSummary>,
    /// Held-out accuracy per candidate scale, per tuned kernel.
    pub tuning: Vec<(String, Vec<(f64, f64)>)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

/// Trains every kernel on every seed. Tuned kernels first select their
/// scale on a validation split with the first seed. Rows come out in
/// (kernel, seed) order regardless of scheduling.
pub fn train_compare(
    ds: &NoisyDataset,
    kernels: &[NetKernel],
    seeds: &[u64],
    p: &NetlabParams,
) -> Result<Comparison, NetlabError> {
    if kernels.len() < 2 || seeds.len() < 5 {
        return Err(NetlabError::Invalid("need at least 2 kernels and 5 seeds".into()));
    }
    let mut tuning = Vec::new();
    let mut sigmas = Vec::with_capacity(kernels.len());
    for &k in kernels {
        if k.is_tuned() {
            let (s, scores) = select_sigma(ds, k, p, seeds[0])?;
            tuning.push((k.name().to_string(), scores));
            sigmas.push(s);
        } else {
            sigmas.push(0.0);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..kernels.len()).flat_map(|k| seeds.iter().map(move |&s| (k, s))).collect();
    let rows: Vec<RunRow> = jobs
        .par_iter()
        .map(|&(k, s)| run_row(ds, kernels[k], sigmas[k], p, s))
        .collect();
    let summaries = kernels
        .iter()
        .enumerate()
        .map(|(k, kern)| {
            let valid: Vec<&RunRow> = rows.iter().filter(|r| r.kernel == kern.name() && r.valid).collect();
            let col = |f: fn(&RunRow) -> f64| mean_std(&valid.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (am, asd) = col(|r| r.test_acc);
            let (tm, tsd) = col(|r| r.trace);
            let (lm, lsd) = col(|r| r.lambda_max);
            KernelSummary {
                kernel: kern.name().to_string(),
                sigma: sigmas[k],
                valid_runs: valid.len(),
                test_acc_mean: am,
                test_acc_std: asd,
                trace_mean: tm,
                trace_std: tsd,
                lambda_max_mean: lm,
                lambda_max_std: lsd,
                grad_evals_mean: col(|r| r.grad_evals as f64).0,
            }
        })
        .collect();
    Ok(Comparison { rows, summaries, tuning })
}
