//! Clusterwise linear regression: data generation, EM and incremental seeded EM
//! fitting, hyperplane split proposals, elite recombination, quality metrics and
//! X-only prediction.

pub mod assignment;
pub mod dataset;
pub mod elite;
pub mod em;
pub mod error;
pub mod metrics;
pub mod predict;
pub mod regression;
pub mod rng;
pub mod stats;
pub mod subspace;

pub use dataset::{generate_problem, Dataset, GroundTruth, ProblemSpec};
pub use error::{ClrError, Result};
pub use regression::ClrModel;
