//! Personalized federated learning with a shared embedding network and
//! hypernetwork: a desk-scale simulator, its wire protocol, and diagnostics.

pub mod nn;
pub mod models;
pub mod data;
pub mod protocol;
pub mod baselines;
pub mod transport;
pub mod analysis;
pub mod experiment;
