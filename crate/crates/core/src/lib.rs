//! Multi-task training with loss-driven dynamic task weights.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod synthdata;
pub mod taskweights;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use synthdata::{Dataset, Modality};
