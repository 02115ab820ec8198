//! Protocol engine and deterministic simulator for witness-validated
//! DePIN networks.
//!
//! The numeric kernels (sampling, anomaly detectors, vote weighting,
//! deterrence arithmetic) are generic over [`Scalar`]; the simulator runs
//! in `f64` through the aliases below.

pub mod anomaly;
pub mod arbitration;
pub mod consensus;
pub mod incentives;
pub mod onboarding;
pub mod primitives;
pub mod scalar;
pub mod simulator;
pub mod stochastic;
pub mod transmission;

pub use scalar::Scalar;

pub type Baseline = anomaly::StreamBaseline<f64>;
pub type Alert = anomaly::AnomalyAlert<f64>;
pub type Tally = consensus::VoteTally<f64>;
