use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("non-finite or unparsable value at row {row}, column `{column}`")]
    NonFiniteValue { row: usize, column: String },
    #[error("input file has no data rows")]
    EmptyFile,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid role map: {0}")]
    InvalidRoles(String),
    #[error("need more than {required} rows, got {rows}")]
    TooFewRows { rows: usize, required: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("control matrix is rank deficient (rank {rank} of {cols})")]
    RankDeficientControls { rank: usize, cols: usize },
    #[error("instruments are rank deficient after partialling out controls (rank {rank} of {k})")]
    RankDeficientInstrumentsAfterPartialling { rank: usize, k: usize },
    #[error("instrument matrix is rank deficient (rank {rank} of {k})")]
    RankDeficient { rank: usize, k: usize },
    #[error("annihilator diagonal M_ii is zero at observation {index}")]
    DivideByZeroHatValue { index: usize },
    #[error("variance estimate is degenerate (crossfit {crossfit:e}, naive {naive:e})")]
    DegenerateVariance { crossfit: f64, naive: f64 },
    #[error("JIVE denominator {denominator:e} is numerically zero")]
    NearSingularDenominator { denominator: f64 },
    #[error("JIVE variance estimate {0:e} is not positive")]
    NonPositiveVariance(f64),
    #[error("grid too coarse: decision flips {flips} times (limit {limit})")]
    GridTooCoarse { flips: usize, limit: usize },
    #[error("calibration file required but not found: {0}")]
    CalibrationMissing(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
}
