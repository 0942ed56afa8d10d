//! Flatness-aware Langevin optimization lab.
//!
//! Samplers that evaluate stochastic gradients at Gaussian-perturbed
//! parameters, together with the numerical machinery to check what they
//! converge to: smoothed surrogates, grid-quadrature Gibbs measures,
//! Wasserstein distances, matrix-free curvature diagnostics, and a small
//! neural-network testbed.

pub mod curvature;
pub mod gibbs;
pub mod harness;
pub mod kernels;
pub mod netlab;
pub mod objective;
pub mod rng;
pub mod smoothing;
pub mod transport;

/// Any failure surfaced by the command-line pipelines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Kernel(#[from] kernels::KernelError),
    #[error(transparent)]
    Smoothing(#[from] smoothing::SmoothingError),
    #[error(transparent)]
    Gibbs(#[from] gibbs::GibbsError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
    #[error(transparent)]
    Curvature(#[from] curvature::CurvatureError),
    #[error(transparent)]
    Netlab(#[from] netlab::NetlabError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 validation, 3 divergence, 4 quadrature guard.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Kernel(kernels::KernelError::Divergence { .. }) => 3,
            Error::Netlab(netlab::NetlabError::NonFinite { .. }) => 3,
            Error::Netlab(netlab::NetlabError::Kernel(kernels::KernelError::Divergence { .. })) => 3,
            Error::Smoothing(smoothing::SmoothingError::NonFinite { .. }) => 3,
            Error::Numerical(_) => 3,
            Error::Gibbs(g) if g.is_guard() => 4,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
