//! Federated learning simulator for FedAvg, FedProx, FedGKD and FedGKD-Vote
//! on small dense networks.
//!
//! FedGKD regularizes each client's local training with a knowledge
//! distillation term toward an ensemble of recent global models, which keeps
//! local models from drifting apart on non-IID data.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use federation::{FedConfig, RoundRecord, Simulation};
pub use losses::Strategy;
pub use nn::{MlpSpec, ParamVector};
