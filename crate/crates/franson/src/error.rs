//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong when building, running, or analyzing a
/// scenario. Validation variants name the offending field so config errors
/// are actionable from the command line.
#[derive(Debug, Error)]
pub enum FransonError {
    /// A scenario or plan field violates an invariant.
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    /// Scenario/plan text could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Unknown preset name.
    #[error("unknown preset `{0}` (expected geneva1998 or geneva1998-exp2)")]
    UnknownPreset(String),

    /// Tag streams handed to an analysis routine must be time sorted.
    #[error("time-tag stream for `{stream}` is not sorted by time")]
    UnsortedStream { stream: String },

    /// Rate quads combined in one computation must share window and
    /// integration time.
    #[error("rate quads do not match: {0}")]
    QuadMismatch(String),

    /// A quad with zero total counts has no defined correlation.
    #[error("rate quad has zero total counts")]
    EmptyQuad,

    /// Far-offset accidental window would overlap the satellite peaks.
    #[error(
        "accidental offset {offset_s} s too small: must exceed \
         arm imbalance + 3 windows = {required_s} s"
    )]
    OffsetTooSmall { offset_s: f64, required_s: f64 },

    /// Fringe fit needs enough phase coverage to determine amplitude.
    #[error("fringe fit needs >= 4 points spanning >= half a period (got {0})")]
    InsufficientSpan(String),

    /// Least-squares design matrix is singular.
    #[error("fringe fit design is singular: {0}")]
    SingularDesign(String),

    /// Fitted visibility exceeds 1 beyond its own uncertainty.
    #[error("fitted visibility {visibility} exceeds 1 + 3*sigma ({sigma})")]
    UnphysicalVisibility { visibility: f64, sigma: f64 },

    /// Reduced CHSH needs the second phase sum at three times the first.
    #[error("reduced CHSH needs phase sums (D, 3D); got {first} and {second}")]
    PhaseRatio { first: f64, second: f64 },

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Scenario and plan disagree about the analyzer topology.
    #[error("topology mismatch: {0}")]
    Topology(String),

    /// Expected event volume exceeds the configured cap.
    #[error("expected ~{expected:.0} tags exceeds cap {cap} (raise max_expected_tags)")]
    ResourceLimit { expected: f64, cap: u64 },

    /// Scan plan is unusable (e.g. no points).
    #[error("invalid scan plan: {0}")]
    Plan(String),

    /// File system failure, with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FransonError {
    /// Shorthand used by validators.
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        FransonError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Wrap an io error with its path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FransonError::Io {
            path: path.into(),
            source,
        }
    }
}
