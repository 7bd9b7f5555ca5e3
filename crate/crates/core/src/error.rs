use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("too few points for curve smoothing: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("duplicate argument {arg} for subject '{subject}' ({var})")]
    DuplicateArgument {
        subject: String,
        var: String,
        arg: f64,
    },

    #[error("no subjects")]
    NoSubjects,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("basis size {n_basis} is too small for degree {degree} (need at least {})", degree + 1)]
    InvalidBasisSize { n_basis: usize, degree: usize },

    #[error("point {point} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { point: f64, lo: f64, hi: f64 },

    #[error("Gram matrix is numerically singular (smallest eigenvalue {0:e})")]
    SingularGram(f64),

    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),

    #[error("evaluation grid has {0} points; at least 3 are required")]
    GridTooShort(usize),

    #[error("covariance is identically zero; no eigencomponents to extract")]
    DegenerateCovariance,

    #[error("score undefined for subject '{0}': no response observations")]
    ScoreUndefined(String),

    #[error("covariate standard deviation {sd:e} at s = {s} is below the floor")]
    DegenerateCovariate { s: f64, sd: f64 },

    #[error("smoothing parameter must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),

    #[error("penalized system is singular: {0}; raise lambda or lower K_x*K_s")]
    SingularSystem(String),

    #[error("GCV is undefined on the whole grid: tr(S) >= n for every candidate")]
    GcvDegenerate,

    #[error("missing scalar covariates: model expects {expected}, got {got}")]
    MissingCovariate { expected: usize, got: usize },

    #[error("score covariance is not positive semidefinite (min eigenvalue {0:e})")]
    InvalidScoreCov(f64),

    #[error("bootstrap replicate {replicate} degenerated after {attempts} redraws: {reason}")]
    BootstrapDegenerate {
        replicate: usize,
        attempts: usize,
        reason: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("experiment unstable: {failed} of {total} replicates failed")]
    ExperimentUnstable { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("incompatible model document: {0}")]
    ModelCompatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularGram(_)
                | Error::DegenerateCovariance
                | Error::DegenerateCovariate { .. }
                | Error::SingularSystem(_)
                | Error::GcvDegenerate
                | Error::InvalidScoreCov(_)
                | Error::BootstrapDegenerate { .. }
                | Error::ExperimentUnstable { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
