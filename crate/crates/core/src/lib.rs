//! Differentially private training of small MLP classifiers, centrally and
//! under federated averaging, with a Rényi-DP accountant.

pub mod accountant;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
