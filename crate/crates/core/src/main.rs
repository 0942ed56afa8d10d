use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use flatland::curvature::spectrum;
use flatland::gibbs::{build_gibbs, coupling_sweep, EnergyKind, GridMeasure, GridSpec, SweepOptions};
use flatland::harness::{
    chains_csv, csv_string, netlab_csv, read_chains_csv, run_excess_risk, run_experiment, write_file,
    ExcessRiskParams, ExperimentConfig,
};
use flatland::kernels::{run_chains, ChainSpec, KernelConfig, KernelKind};
use flatland::netlab::{curvature_at, make_dataset, train, train_compare, NetKernel, NetlabParams};
use flatland::objective::{parse_objective, GridBox, Objective, StochasticGradientModel};
use flatland::rng::keyed_rng;
use flatland::smoothing::surrogate_report;
use flatland::transport::{wp_1d, wp_assignment, wp_to_measure, SampleCloud};
use flatland::{Error, Result};

#[derive(Parser)]
#[command(name = "flatland", version, about = "Flat-minimum sampling experiments")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run sampler chains and write their iterates as CSV.
    Chain(ChainArgs),
    /// Monte Carlo g_eps against the curvature-corrected surrogate at a point.
    Surrogate {
        #[arg(long)]
        objective: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Vec<f64>,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 100_000)]
        n_mc: usize,
    },
    /// Build a Gibbs measure on a grid and write it as JSON.
    Gibbs {
        #[arg(long)]
        objective: String,
        #[arg(long, value_enum, default_value_t = Energy::U)]
        energy: Energy,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 10_000)]
        n_mc: usize,
    },
    /// KL and W2 between the smoothed and surrogate Gibbs measures along a beta sweep.
    CouplingSweep {
        #[arg(long)]
        objective: String,
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 100_000)]
        n_mc: usize,
        #[arg(long)]
        antithetic: bool,
        #[arg(long)]
        no_zoom: bool,
    },
    /// Wasserstein distance between a chains CSV and a measure JSON or another chains CSV.
    Wdist {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1)]
        p: u32,
        #[arg(long, default_value_t = 1024)]
        n_ref: usize,
    },
    /// Top Hessian eigenvalues and trace, for `<objective>` at --theta or `netlab:<kernel>/<seed>`.
    Spectrum {
        #[arg(long)]
        target: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        m: usize,
        /// Scale for trained netlab targets.
        #[arg(long, default_value_t = 5e-3)]
        sigma: f64,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the label-noise network with several samplers and compare.
    Netlab {
        #[arg(long, value_delimiter = ',', default_value = "sgd,sgld,fsgld-coupled,fsgld-fixed,sam")]
        kernels: Vec<NetKernel>,
        /// Number of seeds, counted up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Training rows held out for scale selection.
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sigma_grid: Option<Vec<f64>>,
        #[arg(long)]
        hutchinson_m: Option<usize>,
    },
    /// Excess risk of a smoothed sampler along geometric checkpoints.
    ExcessRisk {
        #[command(flatten)]
        kernel: KernelArgs,
        #[arg(long)]
        objective: String,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 8)]
        chains: u64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        n_mc: usize,
        #[arg(long, default_value_t = 16)]
        n_mc_stationary: usize,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Run a JSON experiment config into the --out directory.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Energy {
    U,
    V,
    GEps,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    hi: f64,
    /// Nodes per axis.
    #[arg(long, default_value_t = 1024)]
    grid: usize,
}

impl GridArgs {
    fn spec(&self, dim: usize) -> GridSpec {
        GridSpec::new(GridBox::cube(dim, self.lo, self.hi), self.grid)
    }
}

#[derive(Args)]
struct KernelArgs {
    /// sgd, sgld, fsgld, rwp-sgd or sam.
    #[arg(long, value_parser = parse_kind)]
    kernel: KernelKind,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Derive beta from sigma through the coupling law.
    #[arg(long)]
    coupled: bool,
    /// Coupling exponent; implies --coupled.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 1)]
    n_pert: usize,
}

impl KernelArgs {
    fn config(&self) -> Result<KernelConfig> {
        let need = |v: Option<f64>, what: &str| v.ok_or_else(|| Error::Config(format!("--{what} is required")));
        let eta = if self.coupled { Some(self.eta.unwrap_or(0.01)) } else { self.eta };
        let cfg = match (self.kernel, eta) {
            (KernelKind::Fsgld, Some(eta)) => KernelConfig::fsgld_coupled(self.lambda, need(self.sigma, "sigma")?, eta)?,
            (_, Some(_)) => return Err(Error::Config("--eta applies to fsgld only".into())),
            (KernelKind::Sgd, None) => KernelConfig::sgd(self.lambda),
            (KernelKind::Sgld, None) => KernelConfig::sgld(self.lambda, need(self.beta, "beta")?),
            (KernelKind::Fsgld, None) => {
                KernelConfig::fsgld(self.lambda, need(self.beta, "beta")?, need(self.sigma, "sigma")?)
            }
            (KernelKind::RwpSgd, None) => KernelConfig::rwp_sgd(self.lambda, need(self.sigma, "sigma")?),
            (KernelKind::Sam, None) => KernelConfig::sam(self.lambda, need(self.rho, "rho")?),
        }
        .with_n_pert(self.n_pert);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ChainArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long)]
    objective: String,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long, default_value_t = 1)]
    chains: u64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    init: Vec<f64>,
    /// Additive gradient noise scale.
    #[arg(long)]
    noise_tau: Option<f64>,
}

fn parse_kind(s: &str) -> std::result::Result<KernelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown kernel {s}"))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn init_for(obj: &dyn Objective, init: &[f64]) -> Result<Vec<f64>> {
    match init.len() {
        0 => Ok(vec![0.0; obj.dim()]),
        n if n == obj.dim() => Ok(init.to_vec()),
        n => Err(Error::Config(format!("--init has {n} values, objective dimension is {}", obj.dim()))),
    }
}

#[derive(Serialize)]
struct ChainSidecar<'a> {
    objective: &'a str,
    kernel: String,
    step_size: f64,
    beta: f64,
    sigma: f64,
    n_pert: usize,
    spec: &'a ChainSpec,
    chains: u64,
    seed: u64,
    grad_evals: u64,
    wall_time_s: f64,
}

fn cmd_chain(a: &ChainArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    let obj = parse_objective(&a.objective)?;
    let cfg = a.kernel.config()?;
    let init = init_for(obj.as_ref(), &a.init)?;
    let d = ChainSpec::with_defaults(a.steps);
    let spec = ChainSpec::new(a.steps, a.burn_in.unwrap_or(d.burn_in), a.thin.unwrap_or(d.thin));
    let oracle = match a.noise_tau {
        Some(tau) => StochasticGradientModel::additive_noise(obj.clone(), tau)?,
        None => StochasticGradientModel::exact(obj.clone()),
    };
    let start = Instant::now();
    let trajs = run_chains(&init, &cfg, &oracle, &spec, seed, a.chains)?;
    let wall = start.elapsed().as_secs_f64();
    emit(out, &chains_csv(&trajs))?;
    if let Some(p) = out {
        let sidecar = ChainSidecar {
            objective: &a.objective,
            kernel: serde_json::to_value(cfg.kind)?.as_str().unwrap_or_default().to_string(),
            step_size: cfg.step_size,
            beta: cfg.beta(),
            sigma: cfg.sigma,
            n_pert: cfg.n_pert,
            spec: &spec,
            chains: a.chains,
            seed,
            grad_evals: trajs.iter().map(|t| t.grad_evals).sum(),
            wall_time_s: wall,
        };
        let mut side = p.as_os_str().to_owned();
        side.push(".json");
        write_file(Path::new(&side), json(&sidecar)?.as_bytes())?;
    }
    Ok(())
}

fn read_measure(path: &Path) -> Result<GridMeasure> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn even_subsample(points: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    if points.len() <= n {
        return points;
    }
    (0..n).map(|i| points[i * points.len() / n].clone()).collect()
}

#[derive(Serialize)]
struct WdistOut {
    p: u32,
    w: f64,
    se: f64,
    n_a: usize,
    n_b: usize,
}

fn cmd_wdist(a: &Path, b: &Path, p: u32, n_ref: usize, seed: u64) -> Result<WdistOut> {
    let pa = read_chains_csv(a)?;
    let n_a = pa.len();
    if b.extension().is_some_and(|e| e == "json") {
        let m = read_measure(b)?;
        let pts = if m.dim() == 1 { pa } else { even_subsample(pa, n_ref.min(1024)) };
        let cloud = SampleCloud::new(pts)?;
        let est = wp_to_measure(&cloud, &m, p, if m.dim() == 1 { n_ref } else { cloud.len() }, &mut keyed_rng(&[seed, 0x7764]))?;
        return Ok(WdistOut { p, w: est.w, se: est.se, n_a, n_b: n_ref });
    }
    let pb = read_chains_csv(b)?;
    let n_b = pb.len();
    let (ca, cb) = (SampleCloud::new(pa)?, SampleCloud::new(pb)?);
    let w = if ca.dim() == 1 {
        wp_1d(&ca, &cb, p)?.value
    } else {
        let n = ca.len().min(cb.len()).min(1024);
        let sa = SampleCloud::new(even_subsample((0..ca.len()).map(|i| ca.point(i).to_vec()).collect(), n))?;
        let sb = SampleCloud::new(even_subsample((0..cb.len()).map(|i| cb.point(i).to_vec()).collect(), n))?;
        wp_assignment(&sa, &sb, p)?
    };
    Ok(WdistOut { p, w, se: 0.0, n_a, n_b })
}

#[derive(Serialize)]
struct NetSpectrum {
    kernel: String,
    seed: u64,
    sigma: f64,
    trace: f64,
    trace_se: f64,
    lambda_max: f64,
}

fn cmd_spectrum(target: &str, theta: &[f64], k: usize, m: usize, sigma: f64, steps: Option<u64>, seed: u64) -> Result<String> {
    if let Some(rest) = target.strip_prefix("netlab:") {
        let (kname, s) = rest
            .split_once('/')
            .ok_or_else(|| Error::Config("netlab targets look like netlab:<kernel>/<seed>".into()))?;
        let kernel: NetKernel = kname.parse()?;
        let run_seed: u64 = s.parse().map_err(|_| Error::Config(format!("bad seed {s}")))?;
        let mut p = NetlabParams { hutchinson_m: m, ..NetlabParams::default() };
        if let Some(n) = steps {
            p.n_steps = n;
        }
        let ds = make_dataset(p.n_train, p.n_test, p.rho, p.data_seed)?;
        let cfg = kernel.config(&p, sigma)?;
        let (params, _) = train(&ds.train_x, &ds.train_y, &cfg, &p, run_seed)?;
        let (trace, trace_se, lambda_max) = curvature_at(&params, &ds.train_x, &ds.train_y, &p, run_seed)?;
        return json(&NetSpectrum { kernel: kernel.name().into(), seed: run_seed, sigma, trace, trace_se, lambda_max });
    }
    let obj = parse_objective(target)?;
    let theta = init_for(obj.as_ref(), theta)?;
    let hvp = |v: &[f64]| obj.hvp(&theta, v);
    json(&spectrum(hvp, obj.dim(), k, m, seed)?)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let out = cli.out.as_deref();
    match cli.cmd {
        Command::Chain(a) => cmd_chain(&a, seed, out),
        Command::Surrogate { objective, theta, sigma, n_mc } => {
            let obj = parse_objective(&objective)?;
            let theta = init_for(obj.as_ref(), &theta)?;
            let r = surrogate_report(obj.as_ref(), &theta, sigma, n_mc, &mut keyed_rng(&[seed, 0x7375]))?;
            emit(out, &json(&r)?)
        }
        Command::Gibbs { objective, energy, beta, sigma, grid, n_mc } => {
            let obj = parse_objective(&objective)?;
            let kind = match energy {
                Energy::U => EnergyKind::U,
                Energy::V => EnergyKind::V { sigma },
                Energy::GEps => EnergyKind::GEps { sigma, n_mc, seed, antithetic: false },
            };
            let m = build_gibbs(obj.as_ref(), &kind, beta, &grid.spec(obj.dim()))?;
            emit(out, &json(&m)?)
        }
        Command::CouplingSweep { objective, betas, eta, grid, n_mc, antithetic, no_zoom } => {
            let obj = parse_objective(&objective)?;
            let opts = SweepOptions { n_mc, seed, antithetic, zoom: !no_zoom };
            let rows = coupling_sweep(obj.as_ref(), &betas, eta, &grid.spec(obj.dim()), &opts)?;
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.beta.to_string(),
                        r.sigma.to_string(),
                        r.kl.to_string(),
                        r.w2.to_string(),
                        r.kl_err.to_string(),
                        r.valid.to_string(),
                    ]
                })
                .collect();
            emit(out, &csv_string(&["beta", "sigma", "kl", "w2", "kl_err", "valid"], &body))?;
            for r in &rows {
                if let Some(e) = &r.error {
                    eprintln!("beta {}: {e}", r.beta);
                }
            }
            if rows.iter().any(|r| r.guard_failure) {
                return Err(Error::Gibbs(flatland::gibbs::GibbsError::ResolutionInsufficient { cells: 0 }));
            }
            Ok(())
        }
        Command::Wdist { a, b, p, n_ref } => emit(out, &json(&cmd_wdist(&a, &b, p, n_ref, seed)?)?),
        Command::Spectrum { target, theta, k, m, sigma, steps } => {
            emit(out, &cmd_spectrum(&target, &theta, k, m, sigma, steps, seed)?)
        }
        Command::Netlab { kernels, seeds, rho, steps, batch, n_train, n_test, n_val, sigma_grid, hutchinson_m } => {
            let d = NetlabParams::default();
            let p = NetlabParams {
                rho: rho.unwrap_or(d.rho),
                n_steps: steps.unwrap_or(d.n_steps),
                batch: batch.unwrap_or(d.batch),
                n_train: n_train.unwrap_or(d.n_train),
                n_test: n_test.unwrap_or(d.n_test),
                n_val: n_val.unwrap_or(d.n_val),
                sigma_grid: sigma_grid.unwrap_or(d.sigma_grid.clone()),
                hutchinson_m: hutchinson_m.unwrap_or(d.hutchinson_m),
                data_seed: seed,
                ..d
            };
            let ds = make_dataset(p.n_train, p.n_test, p.rho, p.data_seed)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| seed + i).collect();
            let cmp = train_compare(&ds, &kernels, &seeds, &p)?;
            emit(out, &netlab_csv(&cmp.rows))?;
            if let Some(path) = out {
                let mut side = path.as_os_str().to_owned();
                side.push(".json");
                write_file(Path::new(&side), json(&cmp)?.as_bytes())?;
            }
            Ok(())
        }
        Command::ExcessRisk { kernel, objective, steps, chains, init, n_mc, n_mc_stationary, grid } => {
            let obj: Arc<dyn Objective> = parse_objective(&objective)?;
            let cfg = kernel.config()?;
            let p = ExcessRiskParams {
                n_steps: steps,
                n_chains: chains,
                init: init_for(obj.as_ref(), &init)?,
                n_mc,
                n_mc_stationary,
                grid: grid.spec(obj.dim()),
                seed,
            };
            let curve = run_excess_risk(&obj, &cfg, &p)?;
            let mut body: Vec<Vec<String>> = curve
                .points
                .iter()
                .map(|pt| vec![pt.k.to_string(), pt.value.to_string(), pt.se.to_string()])
                .collect();
            body.push(vec!["stationary".into(), curve.stationary.gap.to_string(), curve.stationary.se.to_string()]);
            emit(out, &csv_string(&["k", "gap", "se"], &body))
        }
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|source| Error::Io { path: config.display().to_string(), source })?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let dir = out.ok_or_else(|| Error::Config("run needs --out <dir>".into()))?;
            let manifest = run_experiment(&cfg, dir)?;
            eprintln!("{} files written to {}", manifest.files.len(), dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
