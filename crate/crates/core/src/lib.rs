//! One-shot federated learning simulator.
//!
//! Clients train locally and upload models once. The server groups clients by
//! how their models respond to shared noise probes, synthesizes data from each
//! group's ensemble by model inversion, learns per-cluster models that mix
//! knowledge across clusters with weights tuned by a one-step hypergradient,
//! and finally each client fine-tunes its cluster model on local data.

// `!(x >= 0.0)` checks are meant to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod clustering;
pub mod error;
pub mod federation;
pub mod harness;
pub mod numcore;
pub mod optim;
pub mod personalization;
pub mod rng;
pub mod synthesis;

pub use error::{ConfigViolation, Error, Result};
pub use harness::{ExperimentConfig, Mode, RunReport};
pub use numcore::{ArchSpec, BnMode, LossValue, Model, Tensor};
