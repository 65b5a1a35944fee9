//! Federated-learning simulation lab.
//!
//! An in-process cross-silo FL simulator built around a family of
//! variance-reduction client updates: a statistics correction, a gradient
//! control variate, and a statistics control variate are swapped to obtain
//! FedAvg, SCAFFOLD, BN-SCAFFOLD, FedTAN, and the local-BN baselines from a
//! single engine. Communication rounds, exchanged parameters, and gradient
//! evaluations are tallied as training runs, and an oracle suite certifies
//! the control-variate recursions and BN gradients before experiments are
//! trusted.

pub mod bn;
pub mod data;
pub mod error;
pub mod fl;
pub mod nn;
pub mod oracle;
pub mod server;
pub mod tensor;

pub use error::{FlError, Result};
pub use tensor::{Precision, Real, Tensor};
