//! Monte Carlo simulator and analysis toolkit for energy-time entangled
//! photon-pair Bell tests over installed fiber.
//!
//! The crate models a continuously pumped pair source feeding two unbalanced
//! fiber interferometers through lossy links, generates per-detector time-tag
//! streams (photon events plus dark counts), and recovers correlation
//! coefficients, fringe visibilities, CHSH statistics, and key error rates
//! from coincidence counting alone, the same path the hardware takes.
//!
//! Module map:
//! - [`config`]: scenario description, validation, TOML round-trip, presets
//! - [`quantum`]: closed-form outcome laws for a pair through both analyzers
//! - [`engine`]: event-stream Monte Carlo producing time-tag streams
//! - [`coincidence`]: tag matching, rate quads, arrival-difference histograms
//! - [`bell`]: correlation coefficients, fringe fits, CHSH variants, QBER
//! - [`runner`]: scripted experiments, scan plans, reports, file emission

pub mod bell;
pub mod coincidence;
pub mod config;
pub mod engine;
pub mod error;
pub mod quantum;
pub mod runner;

pub use error::FransonError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FransonError>;
