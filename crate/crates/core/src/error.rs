use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")]
    SvdNoConvergence { sweeps: usize, off_norm: f64 },
    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")]
    EigNoConvergence { sweeps: usize, off_norm: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("ill-conditioned system: lambda_min = {lambda_min:.3e}")]
    IllConditioned { lambda_min: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("near-singular mass matrix (det = {0:.3e})")]
    SingularMassMatrix(f64),
    #[error("rollout blow-up at step {step} (norm {norm:.3e})")]
    BlowUp { step: usize, norm: f64 },
    #[error("dataset generation failed: {0}")]
    DataGeneration(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("serialization format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
