use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside the admissible domain (hyperparameter box, dimensions, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The forward model could not be evaluated at `theta`.
    #[error("forward model evaluation failed at theta = {theta:?}: {reason}")]
    Evaluation { theta: Vec<f64>, reason: String },

    /// Invalid configuration. Every violation found is listed.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("all importance weights vanish numerically at xi = {xi:?}")]
    DegenerateWeights { xi: Vec<f64> },

    #[error("estimated variance {value:e} is negative beyond rounding tolerance at xi = {xi:?}")]
    NegativeVariance { xi: Vec<f64>, value: f64 },

    #[error("MAP optimization did not converge from any start (best objective {best_objective:e}, qoi {best_qoi:e})")]
    OptimizationFailure {
        best_theta: Vec<f64>,
        best_objective: f64,
        best_qoi: f64,
    },

    #[error("{failed} of {total} design points failed: {first}")]
    DesignFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("design too small: {0}")]
    DesignTooSmall(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

/// Attaches a pipeline stage label to an error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
