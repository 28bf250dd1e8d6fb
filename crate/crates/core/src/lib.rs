//! Batch-normalized linear models and linear CNNs trained by gradient
//! descent on logistic loss, with reference solvers, numerical checks and
//! experiment drivers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod random;
pub mod solvers;
pub mod trainer;
pub mod verify;

pub use dataset::{Dataset, Example1Config, Example2Config, PatchedDataset, TestSampler};
pub use error::{Error, Result};
pub use harness::{GenReport, RateFit};
pub use model::{LossGrad, MarginProfile, ModelState};
pub use random::Rng;
pub use solvers::{Certificate, SolverReport};
pub use trainer::{ModelKind, Probes, TrainConfig, TrainRun, TrainTrace, TraceRow};
