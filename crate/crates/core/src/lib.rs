//! Simulation, predictive switching control, and imitation-learning toolkit
//! for three-level DC-DC converters.
//!
//! The crate couples a switched-affine converter simulator with a
//! finite-control-set predictive controller that searches over mode
//! sequences with beam search, distills that controller into a compact
//! feedforward classifier, refines the classifier with disagreement-filtered
//! on-policy relabeling, and provides the metric suite and experiment
//! harness used to compare controllers in closed loop. A second converter
//! topology (a three-level buck) exercises cross-topology transfer of the
//! learned policy.
//!
//! Module map:
//!
//! * [`converter`] — boost-converter modes, mode-dependent dynamics,
//!   one-step prediction, parameter perturbation.
//! * [`mpc`] — stage/sequence costs, exhaustive and beam-search mode
//!   selection, the receding-horizon expert policy.
//! * [`scenario`] — closed-loop episodes: outer voltage loop, step-event
//!   timelines, scenario samplers, trajectory recording.
//! * [`dataset`] — expert-labeled sample collection, splits, class
//!   weights, binary dataset container.
//! * [`policy`] — the feedforward softmax classifier, analytic gradients,
//!   Adam training loop, model persistence.
//! * [`dagger`] — disagreement-filtered on-policy relabeling and
//!   fine-tuning.
//! * [`metrics`] — tracking, transient, penalty, switching, and energy
//!   metrics over a recorded trajectory.
//! * [`buck`] — the three-level buck target topology and the transfer
//!   experiment.
//! * [`experiments`] — scenario suites, ablations, sensitivity sweeps, and
//!   the decision-latency benchmark.

pub mod buck;
pub mod converter;
pub mod dagger;
pub mod dataset;
pub mod experiments;
pub mod metrics;
pub mod mpc;
pub mod policy;
pub mod scenario;
pub mod seeding;

use scenario::Trajectory;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    /// A closed-loop episode left the representable operating region. The
    /// prefix recorded before the blow-up is carried along so callers can
    /// still grade what happened.
    #[error("simulation diverged at step {step}")]
    Diverged { step: usize, partial: Box<Trajectory> },

    #[error("horizon {horizon} exceeds the exhaustive-search limit of {max}")]
    HorizonTooLarge { horizon: usize, max: usize },

    #[error("class {class} has no samples; collect more data covering that mode")]
    EmptyClass { class: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("model error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
