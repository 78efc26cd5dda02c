//! Federated averaging Langevin dynamics with convergence bounds and privacy
//! accounting.

pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod svg;
pub mod theory;

pub use engine::{run_chain, run_replicated, RunConfig, Schedule, Scheme, Trajectory};
pub use error::{Error, Result};
pub use metrics::{w2_gaussian, GaussianSummary};
pub use model::{EnergyModel, FederatedDataset, GaussianModel, LogisticModel, Model};
