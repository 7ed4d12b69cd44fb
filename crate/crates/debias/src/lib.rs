//! Ensemble-based debiasing on exactly solvable discrete worlds.
//!
//! The crate builds finite synthetic classification worlds in which the
//! joint distribution over (signal, bias, label) is known in closed form,
//! trains softmax-linear bias-only and main models on them, calibrates the
//! bias-only model post hoc (temperature scaling or a Dirichlet map), and
//! measures how calibration quality affects debiased training. Because the
//! worlds are enumerable, every learned quantity can be checked against an
//! exact Bayes oracle, and the theoretical claims behind the pipeline
//! (posterior decomposition, flip conditions, level-set error bounds) are
//! verified by brute force rather than argued.
//!
//! Modules:
//! - [`prob`] — simplex arithmetic, datasets, the shared numeric floor.
//! - [`world`] — discrete worlds, exact posteriors, sampling, bias shifts.
//! - [`model`] — encoders, softmax-linear models, the four debiased
//!   training objectives, gradient machinery.
//! - [`calibrate`] — temperature scaling, Dirichlet calibration with
//!   off-diagonal/intercept regularization, fold ensembles, distortions.
//! - [`metrics`] — classwise ECE, reliability diagrams, agreement rates.
//! - [`theory`] — level-set analysis and the brute-force theorem suites.
//! - [`experiment`] — end-to-end pipelines, sweeps, reports, verification
//!   drivers used by the CLI.

pub mod calibrate;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod prob;
pub mod theory;
pub mod world;

pub use prob::{Dataset, LabelSpace, LogitVector, ProbVector, Sample, PROB_FLOOR};
pub use world::DiscreteWorld;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a mathematical precondition (negative probability,
    /// non-finite logit, zero-probability conditioning event, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A constructor was handed inconsistent pieces (columns not summing to
    /// one, mismatched dimensions, ...).
    #[error("construction error: {0}")]
    Construction(String),

    /// An iterative fit produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    /// A harness premise does not hold for the supplied instance. Distinct
    /// from an assertion failure: the check was never run.
    #[error("premise rejected: {0}")]
    Premise(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
