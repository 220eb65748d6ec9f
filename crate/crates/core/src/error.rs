use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank deficient (numerical rank {rank} < {cols} columns)")]
    RankDeficientDesign { rank: usize, cols: usize },

    #[error("residual variance estimate is zero: the design reproduces the response exactly")]
    DegenerateVariance,

    #[error("variance components are not identifiable: {0}")]
    NonIdentifiable(String),

    #[error("deleting the subset leaves a rank-deficient or empty design: {0}")]
    SubsetTooLarge(String),

    #[error("deletion block has a leverage eigenvalue of {0:.12}, at or above one")]
    LeverageOne(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite: {0}")]
    NotInvertible(String),

    #[error("cluster covariance is not positive definite")]
    SingularCovariance,

    #[error("operation requires a Gaussian model: {0}")]
    NotGaussianModel(String),

    #[error("replicate distances have zero standard deviation for subset {0}")]
    DegenerateReplicates(String),

    #[error("bootstrap summary has zero spread")]
    ZeroSpread,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by malformed input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Parse { .. } | Error::DimensionMismatch(_) | Error::Io(_)
        )
    }
}
