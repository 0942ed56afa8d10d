//! Experiment configuration, orchestration and persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{mean_and_se, spectrum, SpectrumReport};
use crate::gibbs::{build_gibbs, kl, EnergyKind, GridMeasure, GridSpec, Region};
use crate::kernels::{
    coupled_sigma, geometric_checkpoints, run_chains, ChainSpec, KernelConfig, KernelKind,
    Trajectory,
};
use crate::netlab::{make_dataset, train_compare, NetKernel, NetlabParams, RunRow};
use crate::objective::{parse_objective, NoiseModel, Objective, StochasticGradientModel};
use crate::rng::{keyed_rng, mix};
use crate::smoothing::{estimate_g_eps, v_value};
use crate::transport::{w1_to_measure_1d, wp_to_measure, DistanceEstimate, SampleCloud};
use crate::{Error, Result};

/// One sampler in an experiment. With `eta` set the kernel is coupled and
/// its inverse temperature follows from `sigma`, or, in a beta sweep, its
/// `sigma` follows from the swept `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub step_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_pert: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl KernelSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let kind = serde_json::to_value(self.kind).ok();
            let name = kind.as_ref().and_then(|v| v.as_str()).unwrap_or("kernel").to_string();
            if self.eta.is_some() { format!("{name}-coupled") } else { name }
        })
    }

    /// Builds the kernel, overriding the inverse temperature when sweeping.
    pub fn to_config(&self, swept_beta: Option<f64>) -> Result<KernelConfig> {
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::Config(format!("kernel {} needs {what}", self.label())))
        };
        let mut cfg = match (self.kind, self.eta) {
            (KernelKind::Fsgld, Some(eta)) => {
                let sigma = match swept_beta {
                    Some(b) => coupled_sigma(b, eta)?,
                    None => need(self.sigma, "sigma")?,
                };
                KernelConfig::fsgld_coupled(self.step_size, sigma, eta)?
            }
            (_, Some(_)) => return Err(Error::Config("only fsgld kernels can be coupled".into())),
            (KernelKind::Sgd, None) => KernelConfig::sgd(self.step_size),
            (KernelKind::Sgld, None) => {
                KernelConfig::sgld(self.step_size, swept_beta.or(self.beta).ok_or_else(|| {
                    Error::Config(format!("kernel {} needs beta", self.label()))
                })?)
            }
            (KernelKind::Fsgld, None) => KernelConfig::fsgld(
                self.step_size,
                need(swept_beta.or(self.beta), "beta")?,
                need(self.sigma, "sigma")?,
            ),
            (KernelKind::RwpSgd, None) => KernelConfig::rwp_sgd(self.step_size, need(self.sigma, "sigma")?),
            (KernelKind::Sam, None) => KernelConfig::sam(self.step_size, need(self.sam_radius, "sam_radius")?),
        };
        if let Some(n) = self.n_pert {
            cfg = cfg.with_n_pert(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin: Option<u64>,
    pub chains: u64,
    pub init: Vec<f64>,
}

impl ChainParams {
    pub fn spec(&self) -> ChainSpec {
        let d = ChainSpec::with_defaults(self.steps);
        ChainSpec::new(self.steps, self.burn_in.unwrap_or(d.burn_in), self.thin.unwrap_or(d.thin))
    }
}

/// Quantities computed for every (seed, beta, kernel) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricRequest {
    /// Pooled post-burn-in `W_p` to the target measure `∝ exp(−β v)`.
    W1 { n_ref: usize },
    W2 { n_ref: usize },
    /// `KL(exp(−β g_ε) ‖ exp(−β v))` on the configured grid.
    Kl { n_mc: usize },
    /// Stationary `E[g_ε] − inf v` over post-burn-in iterates.
    ExcessRisk { n_mc: usize },
    /// Curvature at the final state of chain 0.
    Spectrum { k: usize, m: usize },
    /// Fraction of post-burn-in iterates in the region, next to the target
    /// measure's mass there.
    BasinMass { region: Region },
}

/// Network comparison settings, used when the objective is `netlab`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetlabSpec {
    pub params: NetlabParams,
    pub kernels: Vec<NetKernel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Objective id, or `netlab` for the network comparison.
    pub objective: String,
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
    #[serde(default)]
    pub kernels: Vec<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainParams>,
    #[serde(default)]
    pub metrics: Vec<MetricRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub netlab: Option<NetlabSpec>,
}

fn default_noise() -> NoiseModel {
    NoiseModel::Exact
}

const NETLAB_ID: &str = "netlab";

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Resolves every reference and checks every kernel before anything runs.
    pub fn validate(&self) -> Result<Option<Arc<dyn Objective>>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.objective == NETLAB_ID {
            let spec = self.netlab.as_ref().ok_or_else(|| Error::Config("netlab objective needs a netlab section".into()))?;
            if spec.kernels.len() < 2 || self.seeds.len() < 5 {
                return Err(Error::Config("netlab comparisons need at least 2 kernels and 5 seeds".into()));
            }
            return Ok(None);
        }
        let obj = parse_objective(&self.objective)?;
        let chain = self.chain.as_ref().ok_or_else(|| Error::Config("chain parameters are required".into()))?;
        if chain.init.len() != obj.dim() {
            return Err(Error::Config(format!("init has dimension {}, objective has {}", chain.init.len(), obj.dim())));
        }
        if chain.chains == 0 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        chain.spec().validate()?;
        if self.kernels.is_empty() {
            return Err(Error::Config("at least one kernel is required".into()));
        }
        if let Some(b) = &self.betas {
            if b.is_empty() || b.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Config("betas must be positive".into()));
            }
        }
        for k in &self.kernels {
            for beta in self.beta_values() {
                k.to_config(beta)?;
            }
        }
        let needs_grid = self.metrics.iter().any(|m| {
            matches!(m, MetricRequest::W1 { .. } | MetricRequest::W2 { .. } | MetricRequest::Kl { .. } | MetricRequest::ExcessRisk { .. } | MetricRequest::BasinMass { .. })
        });
        if needs_grid && self.grid.is_none() {
            return Err(Error::Config("the requested metrics need a grid".into()));
        }
        if let Some(g) = &self.grid {
            if g.dim() != obj.dim() {
                return Err(Error::Config("grid dimension does not match objective".into()));
            }
        }
        Ok(Some(obj))
    }

    fn beta_values(&self) -> Vec<Option<f64>> {
        match &self.betas {
            Some(b) => b.iter().map(|&x| Some(x)).collect(),
            None => vec![None],
        }
    }

    /// One row per (seed, beta, kernel), seed slowest.
    pub fn rows(&self) -> Vec<RowKey> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for (bi, beta) in self.beta_values().into_iter().enumerate() {
                for ki in 0..self.kernels.len() {
                    out.push(RowKey { seed, beta_index: bi, beta, kernel_index: ki });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowKey {
    pub seed: u64,
    pub beta_index: usize,
    pub beta: Option<f64>,
    pub kernel_index: usize,
}

impl RowKey {
    pub fn id(&self) -> String {
        format!("s{}_b{}_k{}", self.seed, self.beta_index, self.kernel_index)
    }
}

/// Everything measured for one row.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RowMetrics {
    pub row: String,
    pub seed: u64,
    pub kernel: String,
    pub beta: f64,
    pub sigma: f64,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub grad_evals: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w1: Option<DistanceEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<DistanceEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excess_risk: Option<StationaryGap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basin_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basin_mass: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryGap {
    pub gap: f64,
    pub se: f64,
    pub inf_v: f64,
}

// ---------------------------------------------------------------------------
// Grid helpers

/// Minimum of `v` over the grid nodes, memoized per (objective, sigma, grid).
pub fn inf_v(obj: &dyn Objective, sigma: f64, grid: &GridSpec) -> f64 {
    static CACHE: OnceLock<Mutex<BTreeMap<String, f64>>> = OnceLock::new();
    let key = format!("{obj:?}|{sigma:e}|{}", serde_json::to_string(grid).unwrap_or_default());
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(v) = cache.lock().expect("cache lock").get(&key) {
        return *v;
    }
    use rayon::prelude::*;
    let m = grid
        .nodes()
        .par_iter()
        .map(|t| v_value(obj, t, sigma))
        .reduce(|| f64::INFINITY, f64::min);
    cache.lock().expect("cache lock").insert(key, m);
    m
}

/// Location of the highest point of `energy` between its two lowest
/// grid-local minima on `[lo, hi]`, for 1D objectives with two wells.
pub fn basin_split_1d(energy: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Option<f64> {
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let e: Vec<f64> = xs.iter().map(|&x| energy(x)).collect();
    let mut minima: Vec<usize> = (1..n - 1).filter(|&i| e[i] < e[i - 1] && e[i] <= e[i + 1]).collect();
    if minima.len() < 2 {
        return None;
    }
    minima.sort_by(|&a, &b| e[a].total_cmp(&e[b]));
    let (a, b) = (minima[0].min(minima[1]), minima[0].max(minima[1]));
    let top = (a..=b).max_by(|&i, &j| e[i].total_cmp(&e[j]))?;
    Some(xs[top])
}

// ---------------------------------------------------------------------------
// Excess risk and convergence curves

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: u64,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcessRiskCurve {
    pub inf_v: f64,
    pub sigma: f64,
    pub beta: f64,
    pub points: Vec<CurvePoint>,
    pub stationary: StationaryGap,
}

/// Settings for [`run_excess_risk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessRiskParams {
    pub n_steps: u64,
    pub n_chains: u64,
    pub init: Vec<f64>,
    /// Perturbation draws per iterate for checkpoint estimates.
    pub n_mc: usize,
    /// Perturbation draws per stored iterate for the stationary average.
    pub n_mc_stationary: usize,
    pub grid: GridSpec,
    pub seed: u64,
}

/// Excess risk `E[g_ε(θ_k)] − inf v` along the geometric checkpoint
/// schedule, plus its stationary value over post-burn-in iterates.
///
/// Checkpoint SEs come from the spread over chains; the stationary SE from
/// the spread of per-chain averages. A gap below `−4·SE` is an error: it
/// means the grid infimum is wrong.
pub fn run_excess_risk(
    obj: &Arc<dyn Objective>,
    cfg: &KernelConfig,
    p: &ExcessRiskParams,
) -> Result<ExcessRiskCurve> {
    let sigma = cfg.sigma;
    if p.n_chains < 2 {
        return Err(Error::Config("excess risk needs at least 2 chains".into()));
    }
    let floor = inf_v(obj.as_ref(), sigma, &p.grid);
    let oracle = StochasticGradientModel::exact(obj.clone());
    let spec = ChainSpec::with_defaults(p.n_steps).with_checkpoints(geometric_checkpoints(p.n_steps));
    let trajs = run_chains(&p.init, cfg, &oracle, &spec, p.seed, p.n_chains)?;

    let g = |theta: &[f64], words: &[u64], n_mc: usize| -> Result<f64> {
        Ok(estimate_g_eps(obj.as_ref(), theta, sigma, n_mc.max(2), &mut keyed_rng(words))?.mean)
    };
    let mut points = Vec::new();
    for (ci, &(k, _)) in trajs[0].checkpoints.iter().enumerate() {
        let vals = trajs
            .iter()
            .map(|t| g(&t.checkpoints[ci].1, &[p.seed, t.chain_id, k, 0x6b], p.n_mc))
            .collect::<Result<Vec<f64>>>()?;
        let (m, se) = mean_and_se(&vals);
        points.push(CurvePoint { k, value: m - floor, se });
    }
    let per_chain = trajs
        .iter()
        .map(|t| {
            let vals = t
                .iterates
                .iter()
                .zip(&t.steps)
                .map(|(th, &k)| g(th, &[p.seed, t.chain_id, k, 0x73], p.n_mc_stationary))
                .collect::<Result<Vec<f64>>>()?;
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (m, se) = mean_and_se(&per_chain);
    let stationary = StationaryGap { gap: m - floor, se, inf_v: floor };
    for pt in points.iter().chain(std::iter::once(&CurvePoint { k: p.n_steps, value: stationary.gap, se })) {
        if pt.value < -4.0 * pt.se - 1e-12 {
            return Err(Error::Numerical(format!(
                "negative excess risk {} at step {} (se {}): the grid infimum of v is wrong",
                pt.value, pt.k, pt.se
            )));
        }
    }
    Ok(ExcessRiskCurve { inf_v: floor, sigma, beta: cfg.beta(), points, stationary })
}

/// `W₁` between the law of the chain state across chains and a 1D grid
/// measure, at every checkpoint. SE by bootstrap over chains.
pub fn w1_trend(
    trajs: &[Trajectory],
    target: &GridMeasure,
    bootstrap: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let n = trajs.len();
    let mut rng = keyed_rng(&[seed, 0x6273]);
    let mut out = Vec::new();
    for ci in 0..trajs[0].checkpoints.len() {
        let k = trajs[0].checkpoints[ci].0;
        let xs: Vec<f64> = trajs.iter().map(|t| t.checkpoints[ci].1[0]).collect();
        let w = w1_to_measure_1d(&SampleCloud::from_scalars(&xs)?, target)?;
        let mut boots = Vec::with_capacity(bootstrap);
        for _ in 0..bootstrap {
            let re: Vec<f64> = (0..n).map(|_| xs[rng.random_range(0..n)]).collect();
            boots.push(w1_to_measure_1d(&SampleCloud::from_scalars(&re)?, target)?);
        }
        // The spread of the bootstrap replicates is the SE of one estimate.
        let (_, se_of_mean) = mean_and_se(&boots);
        out.push(CurvePoint { k, value: w, se: se_of_mean * (bootstrap as f64).sqrt() });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Plain CSV with a header row; floats use their shortest round-trip form.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn chains_csv(trajs: &[Trajectory]) -> String {
    let d = trajs.first().map_or(0, |t| t.final_state.len());
    let mut header = vec!["chain_id".to_string(), "step".to_string()];
    header.extend((0..d).map(|i| format!("theta_{i}")));
    let mut s = header.join(",");
    s.push('\n');
    for t in trajs {
        for (theta, k) in t.iterates.iter().zip(&t.steps) {
            s.push_str(&format!("{},{}", t.chain_id, k));
            for x in theta {
                s.push_str(&format!(",{x}"));
            }
            s.push('\n');
        }
    }
    s
}

/// Parameter columns of a chains CSV as points.
pub fn read_chains_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty chains file".into()))?.split(',').collect();
    let cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("theta_")).map(|(i, _)| i).collect();
    if cols.is_empty() {
        return Err(Error::Config("chains file has no theta columns".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            cols.iter()
                .map(|&c| {
                    f.get(c)
                        .and_then(|v| v.parse::<f64>().ok())
                        .ok_or_else(|| Error::Config(format!("bad chains row: {l}")))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub files: Vec<ManifestEntry>,
}

/// Single writer for a run directory; the manifest is written last.
struct RunWriter {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl RunWriter {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.dir.join(rel), bytes)?;
        self.entries.push(ManifestEntry { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    fn manifest(&self, complete: bool) -> Result<()> {
        let m = Manifest { complete, files: self.entries.clone() };
        let json = serde_json::to_string_pretty(&m)?;
        write_file(&self.dir.join("manifest.json"), json.as_bytes())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_str(&text)?)
}

/// Validates, runs and persists an experiment.
///
/// Writes `config.json`, per-row chain CSVs, `rows.csv`, `metrics.json`,
/// `summary.txt` and finally `manifest.json` with content hashes. The
/// manifest is marked incomplete until every file is written. A directory
/// holding a different config is refused.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let obj = cfg.validate()?;
    let config_json = cfg.to_json();
    let existing = dir.join("config.json");
    if existing.exists() {
        let old = fs::read_to_string(&existing).map_err(io_err(&existing))?;
        if old != config_json {
            return Err(Error::Config(format!("{} holds a different experiment", dir.display())));
        }
    }
    let mut w = RunWriter { dir: dir.to_path_buf(), entries: Vec::new() };
    w.manifest(false)?;
    w.put("config.json", config_json.as_bytes())?;

    match obj {
        None => run_netlab_experiment(cfg, &mut w)?,
        Some(obj) => run_chain_experiment(cfg, obj, &mut w)?,
    }
    w.manifest(true)?;
    read_manifest(dir)
}

fn run_netlab_experiment(cfg: &ExperimentConfig, w: &mut RunWriter) -> Result<()> {
    let spec = cfg.netlab.as_ref().expect("validated");
    let p = &spec.params;
    let ds = make_dataset(p.n_train, p.n_test, p.rho, p.data_seed)?;
    let cmp = train_compare(&ds, &spec.kernels, &cfg.seeds, p)?;
    w.put("netlab.csv", netlab_csv(&cmp.rows).as_bytes())?;
    w.put("metrics.json", serde_json::to_string_pretty(&cmp)?.as_bytes())?;
    let mut summary = String::new();
    for s in &cmp.summaries {
        summary.push_str(&format!(
            "{}: sigma {} valid {} test_acc {:.4} ± {:.4} trace {:.4} ± {:.4} lambda_max {:.4} ± {:.4}\n",
            s.kernel, s.sigma, s.valid_runs, s.test_acc_mean, s.test_acc_std, s.trace_mean, s.trace_std,
            s.lambda_max_mean, s.lambda_max_std
        ));
    }
    w.put("summary.txt", summary.as_bytes())
}

pub fn netlab_csv(rows: &[RunRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.kernel.clone(),
                r.seed.to_string(),
                r.test_acc.to_string(),
                r.train_loss.to_string(),
                r.trace.to_string(),
                r.lambda_max.to_string(),
                r.grad_evals.to_string(),
                r.valid.to_string(),
            ]
        })
        .collect();
    csv_string(&["kernel", "seed", "test_acc", "train_loss", "trace", "lambda_max", "grad_evals", "valid"], &body)
}

fn run_chain_experiment(cfg: &ExperimentConfig, obj: Arc<dyn Objective>, w: &mut RunWriter) -> Result<()> {
    let chain = cfg.chain.as_ref().expect("validated");
    let oracle = match cfg.noise {
        NoiseModel::Exact => StochasticGradientModel::exact(obj.clone()),
        NoiseModel::AdditiveNoise { tau } => StochasticGradientModel::additive_noise(obj.clone(), tau)?,
        NoiseModel::FiniteSum { .. } => {
            return Err(Error::Config("finite-sum noise needs components; use exact or additive_noise".into()))
        }
    };
    let mut all = Vec::new();
    for key in cfg.rows() {
        let spec_k = &cfg.kernels[key.kernel_index];
        let kcfg = spec_k.to_config(key.beta)?;
        let mut row = RowMetrics {
            row: key.id(),
            seed: key.seed,
            kernel: spec_k.label(),
            beta: kcfg.beta(),
            sigma: kcfg.sigma,
            ..Default::default()
        };
        match run_chains(&chain.init, &kcfg, &oracle, &chain.spec(), key.seed, chain.chains) {
            Ok(trajs) => {
                row.grad_evals = trajs.iter().map(|t| t.grad_evals).sum();
                w.put(&format!("chains/{}.csv", key.id()), chains_csv(&trajs).as_bytes())?;
                match row_metrics(cfg, &obj, &kcfg, &trajs, key.seed, &mut row) {
                    Ok(()) => row.valid = true,
                    Err(e) => row.error = Some(e.to_string()),
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        all.push(row);
    }
    let body: Vec<Vec<String>> = all
        .iter()
        .map(|r| {
            vec![
                r.row.clone(),
                r.seed.to_string(),
                r.kernel.clone(),
                r.beta.to_string(),
                r.sigma.to_string(),
                r.valid.to_string(),
                r.grad_evals.to_string(),
            ]
        })
        .collect();
    w.put("rows.csv", csv_string(&["row", "seed", "kernel", "beta", "sigma", "valid", "grad_evals"], &body).as_bytes())?;
    w.put("metrics.json", serde_json::to_string_pretty(&all)?.as_bytes())?;
    let mut summary = format!("experiment {} on {}\n", cfg.name, cfg.objective);
    for r in &all {
        summary.push_str(&format!(
            "{} {} beta={} sigma={} valid={} grad_evals={}{}\n",
            r.row,
            r.kernel,
            r.beta,
            r.sigma,
            r.valid,
            r.grad_evals,
            r.error.as_ref().map(|e| format!(" error: {e}")).unwrap_or_default()
        ));
    }
    w.put("summary.txt", summary.as_bytes())
}

fn pooled(trajs: &[Trajectory]) -> Vec<Vec<f64>> {
    trajs.iter().flat_map(|t| t.iterates.iter().cloned()).collect()
}

/// Evenly spaced subsample of `n` points, keeping order.
fn subsample(points: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    if points.len() <= n {
        return points.to_vec();
    }
    (0..n).map(|i| points[i * points.len() / n].clone()).collect()
}

fn row_metrics(
    cfg: &ExperimentConfig,
    obj: &Arc<dyn Objective>,
    kcfg: &KernelConfig,
    trajs: &[Trajectory],
    seed: u64,
    row: &mut RowMetrics,
) -> Result<()> {
    let beta = kcfg.beta();
    let sigma = kcfg.sigma;
    let mut target: Option<GridMeasure> = None;
    let mut get_target = |grid: &GridSpec| -> Result<GridMeasure> {
        if target.is_none() {
            if !beta.is_finite() {
                return Err(Error::Config("distribution metrics need a finite beta".into()));
            }
            target = Some(build_gibbs(obj.as_ref(), &EnergyKind::V { sigma }, beta, grid)?);
        }
        Ok(target.clone().expect("just built"))
    };
    let samples = pooled(trajs);
    for (mi, m) in cfg.metrics.iter().enumerate() {
        let mut rng = keyed_rng(&[seed, mi as u64, 0x6d]);
        match m {
            MetricRequest::W1 { n_ref } | MetricRequest::W2 { n_ref } => {
                let p = if matches!(m, MetricRequest::W1 { .. }) { 1 } else { 2 };
                let t = get_target(cfg.grid.as_ref().expect("validated"))?;
                let pts = if t.dim() == 1 { samples.clone() } else { subsample(&samples, *n_ref) };
                let est = wp_to_measure(&SampleCloud::new(pts)?, &t, p, *n_ref, &mut rng)?;
                if p == 1 { row.w1 = Some(est) } else { row.w2 = Some(est) }
            }
            MetricRequest::Kl { n_mc } => {
                let grid = cfg.grid.as_ref().expect("validated");
                let t = get_target(grid)?;
                let kind = EnergyKind::GEps { sigma, n_mc: *n_mc, seed: mix(&[seed, mi as u64]), antithetic: false };
                let f = build_gibbs(obj.as_ref(), &kind, beta, t.grid())?;
                row.kl = Some(kl(&f, &t)?);
            }
            MetricRequest::ExcessRisk { n_mc } => {
                let grid = cfg.grid.as_ref().expect("validated");
                let floor = inf_v(obj.as_ref(), sigma, grid);
                let per_chain = trajs
                    .iter()
                    .map(|t| {
                        let mut r = keyed_rng(&[seed, t.chain_id, mi as u64]);
                        let vals = t
                            .iterates
                            .iter()
                            .map(|th| Ok(estimate_g_eps(obj.as_ref(), th, sigma, (*n_mc).max(2), &mut r)?.mean))
                            .collect::<Result<Vec<f64>>>()?;
                        Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, se) = mean_and_se(&per_chain);
                row.excess_risk = Some(StationaryGap { gap: mean - floor, se, inf_v: floor });
            }
            MetricRequest::Spectrum { k, m } => {
                let theta = trajs[0].final_state.clone();
                let hvp = |v: &[f64]| obj.hvp(&theta, v);
                row.spectrum = Some(spectrum(hvp, obj.dim(), *k, *m, mix(&[seed, mi as u64]))?);
            }
            MetricRequest::BasinMass { region } => {
                let t = get_target(cfg.grid.as_ref().expect("validated"))?;
                row.basin_mass = Some(t.mass_in_region(region)?.mass);
                let inside = samples
                    .iter()
                    .filter(|x| x.iter().enumerate().all(|(i, v)| *v >= region.lo[i] && *v <= region.hi[i]))
                    .count();
                row.basin_fraction = Some(inside as f64 / samples.len().max(1) as f64);
            }
        }
    }
    Ok(())
}
