//! Stochastic Ising model laboratory on the torus `(Z/nZ)^d`.
//!
//! Continuous-time heat-bath / Metropolis Glauber dynamics driven by explicit
//! per-site Poisson update streams, plus the machinery built on top of them:
//! backward update histories and minimal update supports, space-time
//! information-percolation clusters with red/blue/green classification,
//! block components with phase schedules and cut-sets, exact small-system
//! oracles (stationary measure, uniformized transient distributions),
//! monotone coupling from the past, and mixing-time experiments (cutoff
//! location, coupling upper bounds, distinguishing-statistic lower bounds,
//! annealed and quenched comparisons).
//!
//! Everything is deterministic given a seed: streams, replicas, and reports
//! reproduce bit-identically across runs and thread counts.

pub mod clusters;
pub mod dynamics;
pub mod experiments;
pub mod history;
pub mod lattice;
pub mod report;
pub mod sampling;
pub mod stats;
pub mod updates;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty region")]
    EmptyRegion,
    #[error("time {t} outside stream window ({lo}, {hi}]")]
    OutsideWindow { t: f64, lo: f64, hi: f64 },
    #[error("operation supports only the heat-bath rule")]
    UnsupportedRule,
    #[error("{what} = {got} exceeds limit {limit}")]
    TooLarge {
        what: &'static str,
        got: u64,
        limit: u64,
    },
    #[error("dimension {d} unsupported: {need}")]
    BadDimension { d: usize, need: &'static str },
    #[error("coupling from the past did not coalesce within depth {t_max}")]
    CftpExhausted { t_max: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("experiment inconclusive: {0}")]
    Inconclusive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
