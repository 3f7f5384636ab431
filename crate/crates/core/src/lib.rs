//! Deterministic federated-learning simulator for network anomaly detection.

// `!(x > 0.0)` guards are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fault;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod selection;
pub mod server;
pub mod simnet;
pub mod sweep;

pub use error::{Error, Result};
