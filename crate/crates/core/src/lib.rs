//! Deterministic federated-learning simulator for class-imbalanced
//! classification.
//!
//! The numeric core ([`tensor`], [`autodiff`]) is small and self-contained;
//! models, losses, partitioning, federation and evaluation are built on top.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod imbalance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rollout;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
