//! Optimizer kernels under one stepping contract: SGD, SGLD, fSGLD,
//! random-weight-perturbation SGD and SAM.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objective::{norm, StochasticGradient};
use crate::rng::{Slot, StreamKey};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel configuration: {0}")]
    Invalid(String),
    #[error("divergence at step {step}")]
    Divergence { step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Sgd,
    Sgld,
    Fsgld,
    RwpSgd,
    Sam,
}

impl KernelKind {
    pub fn grad_evals_per_step(self) -> u64 {
        match self {
            KernelKind::Sam => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = KernelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "sgld" => Ok(Self::Sgld),
            "fsgld" => Ok(Self::Fsgld),
            "rwp" | "rwp-sgd" => Ok(Self::RwpSgd),
            "sam" => Ok(Self::Sam),
            other => Err(KernelError::Invalid(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Coupling {
    Off,
    /// `β = σ^{−4/(1+η)}`.
    Coupled { eta: f64 },
}

/// Full hyperparameter set of one kernel.
///
/// `beta = f64::INFINITY` switches the diffusion term off. Under
/// [`Coupling::Coupled`] the stored `beta` is ignored and recomputed from
/// `sigma` on every access.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub step_size: f64,
    beta: f64,
    pub sigma: f64,
    pub sam_radius: Option<f64>,
    pub coupling: Coupling,
    /// Perturbed gradients averaged per fSGLD/RWP step.
    pub n_pert: usize,
}

impl KernelConfig {
    pub fn sgd(step_size: f64) -> Self {
        Self::base(KernelKind::Sgd, step_size, f64::INFINITY, 0.0)
    }

    pub fn sgld(step_size: f64, beta: f64) -> Self {
        Self::base(KernelKind::Sgld, step_size, beta, 0.0)
    }

    pub fn fsgld(step_size: f64, beta: f64, sigma: f64) -> Self {
        Self::base(KernelKind::Fsgld, step_size, beta, sigma)
    }

    /// fSGLD with `β` derived from `σ` through the coupling law.
    pub fn fsgld_coupled(step_size: f64, sigma: f64, eta: f64) -> Result<Self, KernelError> {
        let beta = couple_beta_sigma(sigma, eta)?;
        let mut cfg = Self::base(KernelKind::Fsgld, step_size, beta, sigma);
        cfg.coupling = Coupling::Coupled { eta };
        Ok(cfg)
    }

    pub fn rwp_sgd(step_size: f64, sigma: f64) -> Self {
        Self::base(KernelKind::RwpSgd, step_size, f64::INFINITY, sigma)
    }

    pub fn sam(step_size: f64, radius: f64) -> Self {
        let mut cfg = Self::base(KernelKind::Sam, step_size, f64::INFINITY, 0.0);
        cfg.sam_radius = Some(radius);
        cfg
    }

    fn base(kind: KernelKind, step_size: f64, beta: f64, sigma: f64) -> Self {
        Self { kind, step_size, beta, sigma, sam_radius: None, coupling: Coupling::Off, n_pert: 1 }
    }

    pub fn with_n_pert(mut self, n: usize) -> Self {
        self.n_pert = n;
        self
    }

    pub fn beta(&self) -> f64 {
        match self.coupling {
            Coupling::Off => self.beta,
            Coupling::Coupled { eta } => self.sigma.powf(-4.0 / (1.0 + eta)),
        }
    }

    /// Perturbation scale actually applied: SGLD and SGD never perturb.
    fn effective_sigma(&self) -> f64 {
        match self.kind {
            KernelKind::Fsgld | KernelKind::RwpSgd => self.sigma,
            _ => 0.0,
        }
    }

    /// Diffusion scale `sqrt(2λ/β)`; zero for kernels without noise.
    fn diffusion_scale(&self) -> f64 {
        match self.kind {
            KernelKind::Sgld | KernelKind::Fsgld => {
                let b = self.beta();
                if b.is_infinite() {
                    0.0
                } else {
                    (2.0 * self.step_size / b).sqrt()
                }
            }
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::Invalid(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size {} must be positive", self.step_size));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("perturbation scale {} must be >= 0", self.sigma));
        }
        let beta = self.beta();
        if !(beta > 0.0) || beta.is_nan() {
            return bad(format!("inverse temperature {beta} must be positive"));
        }
        if let Coupling::Coupled { eta } = self.coupling {
            couple_beta_sigma(self.sigma, eta)?;
        }
        if self.kind == KernelKind::Sam {
            match self.sam_radius {
                Some(r) if r > 0.0 && r.is_finite() => {}
                _ => return bad("SAM needs a positive radius".into()),
            }
        }
        if self.n_pert == 0 {
            return bad("n_pert must be >= 1".into());
        }
        Ok(())
    }
}

/// `β = σ^{−4/(1+η)}`, the inverse of `σ = β^{−(1+η)/4}`.
///
/// `η = 0` is accepted as the limiting convention.
pub fn couple_beta_sigma(sigma: f64, eta: f64) -> Result<f64, KernelError> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(KernelError::Invalid(format!("coupled sigma {sigma} must lie in (0, 1)")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(KernelError::Invalid(format!("eta {eta} must be >= 0")));
    }
    Ok(sigma.powf(-4.0 / (1.0 + eta)))
}

/// `σ = β^{−(1+η)/4}`.
pub fn coupled_sigma(beta: f64, eta: f64) -> Result<f64, KernelError> {
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(KernelError::Invalid(format!("coupled beta {beta} must exceed 1")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(KernelError::Invalid(format!("eta {eta} must be >= 0")));
    }
    Ok(beta.powf(-(1.0 + eta) / 4.0))
}

/// Largest admissible step size
/// `min{ min(a, a^{1/3}) / (16 (1+L₁)² sqrt(E[(1+φ)⁴])), 1/a }`.
pub fn lambda_max(a: f64, l1: f64, phi_fourth_moment: f64) -> Result<f64, KernelError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(KernelError::Invalid(format!("dissipativity constant {a} must be positive")));
    }
    if !(l1 >= 0.0 && l1.is_finite()) {
        return Err(KernelError::Invalid(format!("Lipschitz constant {l1} must be >= 0")));
    }
    if !(phi_fourth_moment >= 1.0 && phi_fourth_moment.is_finite()) {
        return Err(KernelError::Invalid(format!(
            "moment E[(1+phi)^4] = {phi_fourth_moment} must be >= 1"
        )));
    }
    let lead = a.min(a.cbrt()) / (16.0 * (1.0 + l1).powi(2) * phi_fourth_moment.sqrt());
    Ok(lead.min(1.0 / a))
}

/// Scratch buffers reused across steps.
#[derive(Debug, Clone)]
pub struct StepScratch {
    eps: Vec<f64>,
    point: Vec<f64>,
    grad: Vec<f64>,
    acc: Vec<f64>,
}

impl StepScratch {
    pub fn new(dim: usize) -> Self {
        Self { eps: vec![0.0; dim], point: vec![0.0; dim], grad: vec![0.0; dim], acc: vec![0.0; dim] }
    }
}

fn fill_gaussian<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for o in out.iter_mut() {
        *o = rng.sample(StandardNormal);
    }
}

/// Advances `state` by one kernel step (counter `step`), returning the
/// number of gradient evaluations spent.
///
/// Randomness comes from per-step substreams of `key`: perturbations from
/// [`Slot::Perturb`], data from [`Slot::Data`], diffusion from
/// [`Slot::Diffusion`]. SGLD runs the fSGLD code path with `σ = 0`, and
/// fSGLD/SGLD always draw both Gaussian vectors.
pub fn step<G: StochasticGradient>(
    state: &mut [f64],
    cfg: &KernelConfig,
    oracle: &G,
    key: &StreamKey,
    step: u64,
    scratch: &mut StepScratch,
) -> Result<u64, KernelError> {
    let batch = oracle.sample_batch(key, step);
    let lr = cfg.step_size;
    let evals = match cfg.kind {
        KernelKind::Sgd => {
            oracle.gradient(state, &batch, &mut scratch.grad);
            check_finite(&scratch.grad, step)?;
            state.iter_mut().zip(&scratch.grad).for_each(|(t, g)| *t -= lr * g);
            1
        }
        KernelKind::Sgld | KernelKind::Fsgld | KernelKind::RwpSgd => {
            let sigma = cfg.effective_sigma();
            let n_pert = cfg.n_pert;
            for j in 0..n_pert {
                fill_gaussian(&mut key.rng(step, Slot::Perturb(j as u32)), &mut scratch.eps);
                let grad_target: &[f64] = if sigma == 0.0 {
                    state
                } else {
                    for ((p, t), e) in scratch.point.iter_mut().zip(state.iter()).zip(&scratch.eps) {
                        *p = t + sigma * e;
                    }
                    &scratch.point
                };
                oracle.gradient(grad_target, &batch, &mut scratch.grad);
                check_finite(&scratch.grad, step)?;
                if n_pert == 1 {
                    std::mem::swap(&mut scratch.acc, &mut scratch.grad);
                } else if j == 0 {
                    scratch.acc.copy_from_slice(&scratch.grad);
                } else {
                    scratch.acc.iter_mut().zip(&scratch.grad).for_each(|(a, g)| *a += g);
                }
            }
            if n_pert > 1 {
                let n = n_pert as f64;
                scratch.acc.iter_mut().for_each(|a| *a /= n);
            }
            state.iter_mut().zip(&scratch.acc).for_each(|(t, g)| *t -= lr * g);

            if cfg.kind != KernelKind::RwpSgd {
                fill_gaussian(&mut key.rng(step, Slot::Diffusion), &mut scratch.eps);
                let scale = cfg.diffusion_scale();
                if scale > 0.0 {
                    state.iter_mut().zip(&scratch.eps).for_each(|(t, x)| *t += scale * x);
                }
            }
            n_pert as u64
        }
        KernelKind::Sam => {
            let rho = cfg.sam_radius.unwrap_or(0.0);
            oracle.gradient(state, &batch, &mut scratch.grad);
            check_finite(&scratch.grad, step)?;
            let gnorm = norm(&scratch.grad);
            for ((p, t), g) in scratch.point.iter_mut().zip(state.iter()).zip(&scratch.grad) {
                *p = t + rho * g / (gnorm + 1e-12);
            }
            oracle.gradient(&scratch.point, &batch, &mut scratch.acc);
            check_finite(&scratch.acc, step)?;
            state.iter_mut().zip(&scratch.acc).for_each(|(t, g)| *t -= lr * g);
            2
        }
    };
    check_finite(state, step)?;
    Ok(evals)
}

fn check_finite(v: &[f64], step: u64) -> Result<(), KernelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(KernelError::Divergence { step })
    }
}

/// Length and storage policy of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_steps: u64,
    pub burn_in: u64,
    pub thin: u64,
    /// Step counts at which the state is snapshotted (0 = initial state).
    #[serde(default)]
    pub checkpoints: Vec<u64>,
}

impl ChainSpec {
    pub fn new(n_steps: u64, burn_in: u64, thin: u64) -> Self {
        Self { n_steps, burn_in, thin, checkpoints: Vec::new() }
    }

    /// Burn-in of 20% and thinning that keeps at most 10⁴ stored iterates.
    pub fn with_defaults(n_steps: u64) -> Self {
        let burn_in = n_steps / 5;
        let thin = (n_steps - burn_in).div_ceil(10_000).max(1);
        Self::new(n_steps, burn_in, thin)
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<u64>) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.burn_in >= self.n_steps {
            return Err(KernelError::Invalid(format!(
                "burn-in {} must be smaller than the step count {}",
                self.burn_in, self.n_steps
            )));
        }
        if self.thin == 0 {
            return Err(KernelError::Invalid("thin must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stored_len(&self) -> u64 {
        (self.n_steps - self.burn_in) / self.thin
    }
}

/// A seeded chain of iterates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub seed: u64,
    pub chain_id: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub n_steps: u64,
    pub grad_evals: u64,
    /// Post-burn-in, thinned iterates in step order.
    pub iterates: Vec<Vec<f64>>,
    /// Step numbers of `iterates`.
    pub steps: Vec<u64>,
    pub checkpoints: Vec<(u64, Vec<f64>)>,
    pub final_state: Vec<f64>,
}

/// Runs one chain from `init` for `spec.n_steps` steps.
pub fn run_chain<G: StochasticGradient>(
    init: &[f64],
    cfg: &KernelConfig,
    oracle: &G,
    spec: &ChainSpec,
    seed: u64,
    chain_id: u64,
) -> Result<Trajectory, KernelError> {
    cfg.validate()?;
    spec.validate()?;
    if init.len() != oracle.dim() {
        return Err(KernelError::Invalid(format!(
            "initial state has dimension {}, oracle expects {}",
            init.len(),
            oracle.dim()
        )));
    }
    let key = StreamKey::new(seed, chain_id);
    let mut state = init.to_vec();
    let mut scratch = StepScratch::new(init.len());
    let mut iterates = Vec::with_capacity(spec.stored_len() as usize);
    let mut steps = Vec::with_capacity(spec.stored_len() as usize);
    let mut checkpoints = Vec::new();
    if spec.checkpoints.contains(&0) {
        checkpoints.push((0, state.clone()));
    }
    let mut grad_evals = 0;
    for k in 1..=spec.n_steps {
        grad_evals += step(&mut state, cfg, oracle, &key, k, &mut scratch)?;
        if k > spec.burn_in && (k - spec.burn_in) % spec.thin == 0 {
            iterates.push(state.clone());
            steps.push(k);
        }
        if spec.checkpoints.contains(&k) {
            checkpoints.push((k, state.clone()));
        }
    }
    Ok(Trajectory {
        seed,
        chain_id,
        burn_in: spec.burn_in,
        thin: spec.thin,
        n_steps: spec.n_steps,
        grad_evals,
        iterates,
        steps,
        checkpoints,
        final_state: state,
    })
}

/// Runs chains `0..n_chains` in parallel; results are in chain order.
pub fn run_chains<G: StochasticGradient>(
    init: &[f64],
    cfg: &KernelConfig,
    oracle: &G,
    spec: &ChainSpec,
    seed: u64,
    n_chains: u64,
) -> Result<Vec<Trajectory>, KernelError> {
    (0..n_chains)
        .into_par_iter()
        .map(|c| run_chain(init, cfg, oracle, spec, seed, c))
        .collect()
}

/// Geometric checkpoint schedule `0, 10, 10^1.5, 10², …` up to `n_steps`.
pub fn geometric_checkpoints(n_steps: u64) -> Vec<u64> {
    let mut out = vec![0];
    let mut e = 1.0f64;
    loop {
        let k = 10f64.powf(e).round() as u64;
        if k > n_steps {
            break;
        }
        out.push(k);
        e += 0.5;
    }
    if *out.last().unwrap() != n_steps {
        out.push(n_steps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{DoubleWell, Objective, Quadratic, StochasticGradientModel};
    use std::sync::Arc;

    fn quad1() -> StochasticGradientModel {
        StochasticGradientModel::exact(Arc::new(Quadratic::diagonal(&[1.0]).unwrap()))
    }

    #[derive(Debug)]
    struct Flat;
    impl Objective for Flat {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn gradient_into(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn zero_drift_without_noise_is_a_fixed_point() {
        let m = StochasticGradientModel::exact(Arc::new(Flat));
        let key = StreamKey::new(1, 0);
        let mut s = StepScratch::new(2);
        for sigma in [0.0, 0.5, 3.0] {
            let cfg = KernelConfig::fsgld(0.1, f64::INFINITY, sigma);
            let mut th = vec![0.3, -1.2];
            step(&mut th, &cfg, &m, &key, 1, &mut s).unwrap();
            assert_eq!(th, vec![0.3, -1.2]);
        }
    }

    #[test]
    fn quadratic_linear_contraction() {
        let cfg = KernelConfig::fsgld(0.1, f64::INFINITY, 0.0);
        let mut th = vec![1.0];
        step(&mut th, &cfg, &quad1(), &StreamKey::new(0, 0), 1, &mut StepScratch::new(1)).unwrap();
        assert_eq!(th, vec![0.9]);
    }

    #[test]
    fn perturbed_step_moments() {
        // θ' = θ − λ(θ + ε): mean 0.9, variance λ²σ² = 0.0025.
        let cfg = KernelConfig::fsgld(0.1, f64::INFINITY, 0.5);
        let m = quad1();
        let key = StreamKey::new(17, 0);
        let mut s = StepScratch::new(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|k| {
                let mut th = vec![1.0];
                step(&mut th, &cfg, &m, &key, k, &mut s).unwrap();
                th[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.9).abs() <= 4.0 * (var / n as f64).sqrt());
        assert!((var / 0.0025 - 1.0).abs() <= 0.1, "{var}");
    }

    #[test]
    fn sgd_chain_is_geometric() {
        let spec = ChainSpec::new(10, 0, 1);
        let t = run_chain(&[1.0], &KernelConfig::sgd(0.5), &quad1(), &spec, 0, 0).unwrap();
        let expected: Vec<Vec<f64>> = (1..=10).map(|k| vec![0.5f64.powi(k)]).collect();
        assert_eq!(t.iterates, expected);
        assert_eq!(t.grad_evals, 10);
    }

    #[test]
    fn chains_are_deterministic() {
        let m = StochasticGradientModel::exact(Arc::new(DoubleWell::new(0.3, 0.05).unwrap()));
        let cfg = KernelConfig::fsgld_coupled(0.01, 0.3, 0.01).unwrap();
        let spec = ChainSpec::new(500, 100, 3).with_checkpoints(vec![0, 10, 500]);
        let a = run_chain(&[0.2], &cfg, &m, &spec, 42, 1).unwrap();
        let b = run_chain(&[0.2], &cfg, &m, &spec, 42, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterates.len() as u64, (500 - 100) / 3);
        assert_eq!(a.checkpoints.len(), 3);
        let c = run_chain(&[0.2], &cfg, &m, &spec, 42, 2).unwrap();
        assert_ne!(a.final_state, c.final_state);
    }

    #[test]
    fn grad_eval_accounting() {
        let m = quad1();
        let spec = ChainSpec::new(100, 0, 1);
        for (cfg, per) in [
            (KernelConfig::sgd(0.1), 1),
            (KernelConfig::sgld(0.1, 10.0), 1),
            (KernelConfig::fsgld(0.1, 10.0, 0.1), 1),
            (KernelConfig::rwp_sgd(0.1, 0.1), 1),
            (KernelConfig::sam(0.1, 0.05), 2),
            (KernelConfig::fsgld(0.1, 10.0, 0.1).with_n_pert(3), 3),
        ] {
            let t = run_chain(&[1.0], &cfg, &m, &spec, 0, 0).unwrap();
            assert_eq!(t.grad_evals, 100 * per, "{cfg:?}");
        }
    }

    #[test]
    fn sgld_and_fsgld_share_code_path() {
        let m = StochasticGradientModel::additive_noise(
            Arc::new(DoubleWell::new(0.3, 0.05).unwrap()),
            0.5,
        )
        .unwrap();
        let spec = ChainSpec::new(1000, 0, 1);
        let a = run_chain(&[0.1], &KernelConfig::sgld(0.01, 50.0), &m, &spec, 9, 0).unwrap();
        let b = run_chain(&[0.1], &KernelConfig::fsgld(0.01, 50.0, 0.0), &m, &spec, 9, 0).unwrap();
        assert_eq!(a.iterates, b.iterates);
    }

    #[test]
    fn fsgld_embeds_sgd() {
        let m = StochasticGradientModel::exact(Arc::new(DoubleWell::new(0.3, 0.05).unwrap()));
        let spec = ChainSpec::new(1000, 0, 1);
        let a = run_chain(&[-0.4], &KernelConfig::sgd(0.01), &m, &spec, 3, 0).unwrap();
        let b = run_chain(&[-0.4], &KernelConfig::fsgld(0.01, f64::INFINITY, 0.0), &m, &spec, 3, 0)
            .unwrap();
        assert_eq!(a.iterates, b.iterates);
    }

    #[test]
    fn stationary_variance_approaches_inverse_beta() {
        let beta = 4.0;
        for lr in [0.1, 0.01] {
            let cfg = KernelConfig::sgld(lr, beta);
            let spec = ChainSpec::new(1_000_000, 10_000, 1);
            let t = run_chain(&[0.0], &cfg, &quad1(), &spec, 5, 0).unwrap();
            let xs: Vec<f64> = t.iterates.iter().map(|v| v[0]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!((var * beta - 1.0).abs() <= 0.1, "lr {lr}: var {var}");
        }
    }

    #[test]
    fn sam_uses_normalized_ascent() {
        // ∇u = θ on θ = 2: θ_adv = 2 + ρ, θ' = 2 − λ(2 + ρ).
        let cfg = KernelConfig::sam(0.1, 0.5);
        let mut th = vec![2.0];
        step(&mut th, &cfg, &quad1(), &StreamKey::new(0, 0), 1, &mut StepScratch::new(1)).unwrap();
        assert!((th[0] - (2.0 - 0.1 * 2.5)).abs() < 1e-12);
        // Zero gradient: the guard keeps the ascent point finite.
        let mut th = vec![0.0];
        step(&mut th, &cfg, &quad1(), &StreamKey::new(0, 0), 1, &mut StepScratch::new(1)).unwrap();
        assert_eq!(th, vec![0.0]);
    }

    #[test]
    fn divergence_reports_step() {
        let m = StochasticGradientModel::exact(Arc::new(Quadratic::diagonal(&[1.0]).unwrap()));
        let spec = ChainSpec::new(5000, 0, 1);
        let err = run_chain(&[1.0], &KernelConfig::sgd(3.0), &m, &spec, 0, 0).unwrap_err();
        assert!(matches!(err, KernelError::Divergence { step } if step > 100));
    }

    #[test]
    fn config_validation() {
        assert!(KernelConfig::sgd(0.0).validate().is_err());
        assert!(KernelConfig::fsgld(0.1, -1.0, 0.1).validate().is_err());
        assert!(KernelConfig::fsgld(0.1, 1.0, -0.1).validate().is_err());
        let mut sam = KernelConfig::sam(0.1, 0.1);
        sam.sam_radius = None;
        assert!(sam.validate().is_err());
        assert!(KernelConfig::fsgld(0.1, 10.0, 0.0).validate().is_ok());
        assert!(KernelConfig::sgd(0.1).with_n_pert(0).validate().is_err());
        let spec = ChainSpec::new(10, 10, 1);
        assert!(run_chain(&[0.0], &KernelConfig::sgd(0.1), &quad1(), &spec, 0, 0).is_err());
    }

    #[test]
    fn coupling_law() {
        assert!((couple_beta_sigma(0.1, 0.0).unwrap() - 1e4).abs() < 1e-8);
        let b = couple_beta_sigma(0.01, 0.01).unwrap();
        assert!((b / 10f64.powf(8.0 / 1.01) - 1.0).abs() < 1e-12);
        assert!((b - 8.3328e7).abs() / 8.3328e7 < 1e-4);
        assert!((coupled_sigma(1e4, 0.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(couple_beta_sigma(1.0, 0.01).is_err());
        assert!(couple_beta_sigma(0.0, 0.01).is_err());
        let cfg = KernelConfig::fsgld_coupled(0.01, 0.05, 0.01).unwrap();
        assert_eq!(cfg.beta(), 0.05f64.powf(-4.0 / 1.01));
    }

    #[test]
    fn lambda_max_examples() {
        assert_eq!(lambda_max(1.0, 1.0, 16.0).unwrap(), 0.00390625);
        assert!((lambda_max(8.0, 0.0, 1.0).unwrap() - 0.125).abs() < 1e-15);
        assert!((lambda_max(0.001, 1.0, 1.0).unwrap() - 1.5625e-5).abs() < 1e-18);
        assert!(lambda_max(0.0, 1.0, 1.0).is_err());
        assert!(lambda_max(1.0, -1.0, 1.0).is_err());
        assert!(lambda_max(1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(geometric_checkpoints(1000), vec![0, 10, 32, 100, 316, 1000]);
        assert_eq!(geometric_checkpoints(50), vec![0, 10, 32, 50]);
    }

    #[test]
    fn default_chain_spec() {
        let s = ChainSpec::with_defaults(100_000);
        assert_eq!(s.burn_in, 20_000);
        assert!(s.stored_len() <= 10_000);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coupling_round_trips(sigma in 0.001f64..0.999, eta in 0.0f64..2.0) {
                let beta = couple_beta_sigma(sigma, eta).unwrap();
                let back = beta.powf(-(1.0 + eta) / 4.0);
                prop_assert!((back / sigma - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn stored_length_matches_formula(n in 2u64..400, b in 0u64..200, thin in 1u64..9) {
                prop_assume!(b < n);
                let spec = ChainSpec::new(n, b, thin);
                let t = run_chain(&[0.5], &KernelConfig::sgd(0.1), &quad1(), &spec, 0, 0).unwrap();
                prop_assert_eq!(t.iterates.len() as u64, (n - b) / thin);
            }
        }
    }
}
