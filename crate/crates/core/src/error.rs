use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("singular matrix in block `{block}`")]
    Singular { block: &'static str },

    #[error("fixed point did not converge after {iterations} sweeps (last residual {last:.3e})")]
    NoConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("quadrature failed on [{lo}, {hi}]: error estimate {estimate:.3e} above tolerance {tolerance:.3e}")]
    Quadrature {
        lo: f64,
        hi: f64,
        estimate: f64,
        tolerance: f64,
    },

    #[error("log-determinant branch mismatch: phase difference {0:.3e} rad")]
    Branch(f64),

    #[error("degenerate scenario: {0}")]
    Degenerate(String),

    #[error("{failed} of {total} trials failed")]
    TrialFailures { failed: usize, total: usize },

    #[error("line search exhausted at iteration {iteration}")]
    Stall { iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
