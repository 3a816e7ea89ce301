use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside the schedule span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("invalid interval [{t0}, {t1}]: the end must lie strictly after the start")]
    InvalidInterval { t0: f64, t1: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate averaged volatility: {0}")]
    DegenerateVolatility(String),

    #[error("ellipticity violated at time {time}: smallest eigenvalue {min_eigenvalue:e}")]
    EllipticityViolation { time: f64, min_eigenvalue: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate domain: no interior nodes remain after masking")]
    DegenerateDomain,

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("linear solver failed after {iterations} iterations (relative residual {residual:e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("periodic grid too narrow: wrap-around kernel mass {wrap_mass:e} exceeds {threshold:e}")]
    Truncation { wrap_mass: f64, threshold: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
