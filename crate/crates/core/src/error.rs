//! Crate-wide error type.
//!
//! Variants carry the module that raised them in the message prefix so CLI
//! users can tell a data problem from a numerical one.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // data-model
    #[error("data: missing column '{0}'")]
    MissingColumn(String),
    #[error("data: non-finite value in '{column}' at data row {row}")]
    NonFiniteValue { column: String, row: usize },
    #[error("data: missing value in '{column}' at data row {row}")]
    MissingValue { column: String, row: usize },
    #[error("data: input contains a single cluster '{0}'; at least two clusters are required")]
    SingleClusterInput(String),
    #[error("data: cluster '{cluster}' has unequal occasion counts across outcomes ({detail})")]
    OccasionMismatch { cluster: String, detail: String },
    #[error("data: item '{item}' has no rows for participant '{participant}'")]
    ItemMissingForParticipant { item: String, participant: String },
    #[error("data: {0}")]
    InvalidDataset(String),

    // working-covariance
    #[error("weights: non-positive variance estimate at cluster '{cluster}', occasion {index}")]
    NonPositiveVariance { cluster: String, index: usize },
    #[error("weights: matrix for cluster '{cluster}', outcome '{outcome}' is not symmetric")]
    NotSymmetric { cluster: String, outcome: String },
    #[error(
        "weights: matrix for cluster '{cluster}', outcome '{outcome}' is not positive definite \
         (min eigenvalue {min_eig:.3e})"
    )]
    NotPositiveDefinite {
        cluster: String,
        outcome: String,
        min_eig: f64,
    },
    #[error("weights: residual variance is zero for outcome '{outcome}'")]
    DegenerateResiduals { outcome: String },

    // score-engine
    #[error(
        "score: nuisance cross-product is singular for outcome '{outcome}' \
         (condition estimate {condition:.3e})"
    )]
    SingularNuisance { outcome: String, condition: f64 },
    #[error("score: all clusterwise score contributions are zero for outcome '{outcome}'")]
    DegenerateScore { outcome: String },

    // resampler
    #[error("flips: exhaustive enumeration needs 2^{n_clusters} rows; the cap is 2^20")]
    EnumerationTooLarge { n_clusters: usize },
    #[error("flips: the number of flips must be at least 1")]
    InvalidB,
    #[error("flips: {0}")]
    DimensionMismatch(String),

    // combine-multiplicity
    #[error("combine: unknown combining function '{0}'")]
    UnknownCombiner(String),

    // baselines
    #[error("baselines: design matrix is rank deficient for outcome '{outcome}'")]
    RankDeficientDesign { outcome: String },
    #[error("baselines: leverage is one at pooled row {row}; HC3 is undefined")]
    LeverageOne { row: usize },
    #[error("baselines: zero residual variance for outcome '{outcome}'")]
    DegenerateFit { outcome: String },

    // sim-harness
    #[error("sim: correlation {value} is outside the positive-definite range for dimension {dim}")]
    InvalidCorrelation { value: f64, dim: usize },
    #[error("sim: unknown method '{0}'")]
    UnknownMethod(String),

    // shared plumbing
    #[error("config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of numerical character (singularities, degeneracies)
    /// as opposed to input validation. The CLI maps these to exit code 3.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NonPositiveVariance { .. }
                | Error::DegenerateResiduals { .. }
                | Error::SingularNuisance { .. }
                | Error::DegenerateScore { .. }
                | Error::RankDeficientDesign { .. }
                | Error::LeverageOne { .. }
                | Error::DegenerateFit { .. }
        )
    }
}
