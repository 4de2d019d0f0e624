use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid mode basis: {0}")]
    InvalidBasis(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("unknown mode label {0}")]
    UnknownLabel(i32),
    #[error("operands are defined on different mode bases")]
    BasisMismatch,
    #[error("at least 2 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("eigen-decomposition failed")]
    EigenFailure,
    #[error("no calibration record for {frequency_hz} Hz")]
    MissingCalibration { frequency_hz: f64 },
    #[error("singular design matrix for the fit at {frequency_hz} Hz")]
    SingularDesign { frequency_hz: f64 },
    #[error("drift matrix is not Hurwitz (max real part {max_real_part:e}); pump above threshold")]
    NotHurwitz { max_real_part: f64 },
    #[error("covariance diverged at t = {time:e}; pump above threshold")]
    Diverged { time: f64 },
    #[error("Lyapunov residual {residual:e} exceeds tolerance")]
    LyapunovResidual { residual: f64 },
    #[error("pump scheme produces no resonant mode pairs in this basis")]
    EmptyGraph,
    #[error("pinned (zero-uncertainty) elements are incompatible with physicality")]
    InfeasiblePinned,
}

impl Error {
    /// True for failures of a numerical procedure on otherwise valid input
    /// (threshold crossings, non-convergence, singular systems).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite
                | Error::EigenFailure
                | Error::SingularDesign { .. }
                | Error::NotHurwitz { .. }
                | Error::Diverged { .. }
                | Error::LyapunovResidual { .. }
                | Error::InfeasiblePinned
        )
    }
}
