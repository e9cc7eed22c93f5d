use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("SOC {soc} outside [0, 1]")]
    SocOutOfRange { soc: f64 },

    #[error("scaled SOC {s_prime} outside the open interval (0, 1); was scaling skipped?")]
    RegressorDomain { s_prime: f64 },

    #[error("{mode} segment is not constant-current (spread {spread:.3e} A around median {median:.6} A)")]
    NotConstantCurrent {
        mode: &'static str,
        spread: f64,
        median: f64,
    },

    #[error("segment detection failed: {reason} (mode sequence: {sequence})")]
    Segments { reason: String, sequence: String },

    #[error("{mode} segment has zero duration")]
    ZeroLengthSegment { mode: &'static str },

    #[error("underdetermined system: {rows} usable rows, need at least {required}")]
    Underdetermined { rows: usize, required: usize },

    #[error(
        "design matrix is rank deficient or ill-conditioned (condition number {condition:.3e})"
    )]
    IllConditioned { condition: f64 },

    #[error("protocol timed out in {phase} after {elapsed_s:.1} s")]
    Timeout { phase: &'static str, elapsed_s: f64 },

    #[error("terminal voltage {voltage_v:.6} V exceeded the {limit_v:.6} V limit during {phase}")]
    SafetyLimit {
        phase: &'static str,
        voltage_v: f64,
        limit_v: f64,
    },

    #[error("parse error in {source_name}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        source_name: String,
        line: Option<usize>,
        message: String,
    },

    #[error("cell id mismatch: {left} vs {right}")]
    CellMismatch { left: String, right: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "E_INPUT",
            Error::SocOutOfRange { .. } => "E_SOC_RANGE",
            Error::RegressorDomain { .. } => "E_REGRESSOR_DOMAIN",
            Error::NotConstantCurrent { .. } => "E_NOT_CC",
            Error::Segments { .. } => "E_SEGMENTS",
            Error::ZeroLengthSegment { .. } => "E_EMPTY_SEGMENT",
            Error::Underdetermined { .. } => "E_UNDERDETERMINED",
            Error::IllConditioned { .. } => "E_ILL_CONDITIONED",
            Error::Timeout { .. } => "E_TIMEOUT",
            Error::SafetyLimit { .. } => "E_SAFETY",
            Error::Parse { .. } => "E_PARSE",
            Error::CellMismatch { .. } => "E_CELL_MISMATCH",
            Error::Io(_) => "E_IO",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must be finite, got {value}"
        )))
    }
}
