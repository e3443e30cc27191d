//! Federated learning orchestration for token-level NER.

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod privacy;
pub mod protocol;
pub mod report;
pub mod seeding;
pub mod transport;
pub mod trustops;

pub use error::{FedError, Result};
