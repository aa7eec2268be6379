use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- data loading ----
    #[error("structural CSV error: {0}")]
    Structure(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a finite number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column `{column}` must be {expected}")]
    ColumnKind {
        column: String,
        expected: &'static str,
    },

    #[error("column `{0}` is not a 0/1 exposure")]
    NotBinary(String),

    // ---- formulas and design matrices ----
    #[error("formula syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unsupported formula feature at byte {offset}: {feature}")]
    Unsupported { offset: usize, feature: String },

    #[error("schema mismatch for column `{column}`: {detail}")]
    SchemaMismatch { column: String, detail: String },

    #[error("column `{column}` has level `{level}` not seen when the design was built")]
    UnseenLevel { column: String, level: String },

    // ---- model fitting ----
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("weighted information matrix is rank deficient (rank {rank} < {p})")]
    RankDeficient { rank: usize, p: usize },

    #[error("IRLS did not converge after {iterations} iterations (last deviance {deviance})")]
    NotConverged {
        iterations: usize,
        deviance: f64,
        coefficients: Vec<f64>,
    },

    #[error("step halving exhausted: fitted means left the admissible region")]
    StepHalvingExhausted,

    #[error("positivity violated: fitted propensity is exactly 0 or 1 at rows {rows:?}")]
    Positivity { rows: Vec<usize> },

    #[error("unsupported: {0}")]
    UnsupportedModel(String),

    // ---- inference / simulation ----
    #[error("{failed} of {attempted} bootstrap refits failed (limit {limit})")]
    BootstrapFailures {
        failed: usize,
        attempted: usize,
        limit: usize,
    },

    #[error("scenario `{scenario}`: {failed} of {replicates} replicates failed")]
    ScenarioFailures {
        scenario: String,
        failed: usize,
        replicates: usize,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Whether the error is a numerical failure of a single fit, as opposed to
    /// bad input. Resampling loops redraw on these.
    pub fn is_fit_failure(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::NotConverged { .. }
                | Error::StepHalvingExhausted
                | Error::Positivity { .. }
                | Error::InvalidInput(_)
        )
    }
}
