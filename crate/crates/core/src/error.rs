use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input outside domain: {0}")]
    InputDomain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Schur-stable (spectral radius {0:.6})")]
    NotSchurStable(f64),

    #[error("iteration did not converge within {0} steps")]
    NoConvergence(usize),

    #[error("root is not bracketed: f({lo}) = {f_lo}, f({hi}) = {f_hi}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("controller gain design failed: {0}")]
    Design(String),

    #[error("numerical consistency check failed: {0}")]
    Numerical(String),

    #[error("energy constraint violated: {0}")]
    Infeasible(String),

    #[error("MSE bound undefined: eta = {0:.6e} is not positive")]
    BoundUndefined(f64),

    #[error("no channel statistics available")]
    EmptyStats,

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
