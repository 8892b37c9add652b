//! Loan-screening toolkit.
//!
//! The crate covers the whole screening workflow for a binary bad-loan
//! target:
//!
//! * [`data_model`]: schemas, portfolios, CSV ingestion, stratified splits and
//!   undersampling.
//! * [`privacy`]: anonymization (identifier removal) and pseudonymization
//!   (keyed masking plus Gaussian noising).
//! * [`feature_select`]: bias-aware eligibility filtering and greedy mRMR
//!   selection with plug-in mutual information.
//! * [`gbdt`]: second-order gradient boosting of regression trees under the
//!   logistic loss with exact greedy split finding.
//! * [`calibration`]: sigmoid and isotonic calibrators, reliability diagrams
//!   and expected calibration error.
//! * [`metrics`]: Brier score, Brier skill score and the confusion-matrix rate
//!   family.
//! * [`monitor`]: population stability index and Kolmogorov-Smirnov drift
//!   scans.
//! * [`synthgen`]: synthetic portfolio generator.
//! * [`pipeline`]: configuration and orchestration used by the CLI.
//!
//! Every randomized operation takes an explicit `u64` seed and draws from
//! ChaCha8 (see [`rng`]).

pub mod calibration;
pub mod data_model;
pub mod feature_select;
pub mod gbdt;
pub mod metrics;
pub mod monitor;
pub mod pipeline;
pub mod privacy;
pub mod rng;
pub mod synthgen;

pub use data_model::{
    Availability, BiasClass, FeatureKind, FeatureSchema, FeatureSpec, LoanRecord, Outcome,
    Portfolio, PortfolioKind, PrivacyClass, Value,
};

/// Crate version embedded in every emitted artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
