use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contraction condition violated: h * Lip(psi) = {product} must be < 1 (h = {h}, Lip = {lipschitz})")]
    Contraction { h: f64, lipschitz: f64, product: f64 },

    #[error("path blow-up: non-finite state on path {path} at step {step}")]
    PathBlowUp { path: usize, step: usize },

    #[error("non-finite residual on path {path} at step {step}")]
    NonFiniteResidual { path: usize, step: usize },

    #[error("optimizer received a non-finite gradient at update {update} (parameter index {index})")]
    NonFiniteGradient { update: u64, index: usize },

    #[error("training diverged at step {step}, epoch {epoch}: loss = {loss}")]
    TrainingDiverged { step: usize, epoch: usize, loss: f64 },

    #[error("approximation failure: achieved sup-error {achieved} does not reach target {target}")]
    ApproximationFailure { achieved: f64, target: f64 },

    #[error("unsupported network depth {depth} (expected {expected})")]
    UnsupportedDepth { depth: usize, expected: usize },

    #[error("Picard iteration failed to contract (distance grew from {previous} to {current} at iteration {iteration})")]
    PicardDivergence {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
