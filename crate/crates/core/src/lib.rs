//! Deterministic single-process simulator for split-learning protocols.
//!
//! The crate trains small dense networks under sequential and parallel split
//! learning (SSL, PSL), federated averaging (FL), SplitFed (SFL) and parallel
//! split learning with split-layer gradient averaging and learning-rate
//! splitting (SLR, SGL, SGLR). Alongside the training engines it provides a
//! closed-form communication-cost model with a measured byte ledger, a
//! histogram mutual-information leakage estimator, and an experiment harness.
//!
//! Module map:
//!
//! - [`nn`]: tensors in, gradients out. Dense/ReLU/softmax, Adam, SGD.
//! - [`split`]: cut-layer partitioning, smashed data, server step.
//! - [`protocols`]: the round engines and the epoch-level [`protocols::Simulation`].
//! - [`comm`]: analytic cost formulas, [`comm::CommLedger`], reconciliation.
//! - [`data`]: IDX loading, synthetic blobs, IID partitioning.
//! - [`leakage`]: plug-in mutual information.
//! - [`harness`]: JSON configs, runs, sweeps, CSV/JSON-lines output.

pub mod comm;
pub mod data;
pub mod error;
pub mod harness;
pub mod leakage;
pub mod nn;
pub mod protocols;
pub mod rng;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
