//! Fingerprint-based indoor localization with a two-stage k-NN cascade.
//!
//! Stage 1 identifies the environment type from hybrid RF features; stage 2
//! uses the feature combination selected for that environment to estimate
//! position. A parametric multipath simulator produces synthetic surveys so
//! the whole pipeline runs without measurement hardware.
//!
//! Module map:
//! - [`channel`]: CTF synthesis, FCF, RSS, stochastic environment profiles
//! - [`dataset`]: survey generation, seeded splits, table import/export
//! - [`features`]: primary and hybrid feature vectors, z-scoring
//! - [`knn`]: exhaustive k-NN search, voting, position aggregation
//! - [`cascade`]: policy fitting and the two-stage model
//! - [`eval`]: RMSE, alpha, confusion matrix, k sweeps, latency
//! - [`pipeline`]: the generate / ingest / train / evaluate / localize / reproduce commands

pub mod cascade;
pub mod channel;
pub mod dataset;
pub mod environment;
pub mod error;
pub mod eval;
pub mod features;
pub mod knn;
pub mod kv;
pub mod pipeline;

pub use environment::{Environment, Point};
pub use error::{Error, Result};
