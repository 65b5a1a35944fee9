//! Batch experiment front-end for the federated-learning simulation lab.

pub mod config;
pub mod experiment;
pub mod gates;
