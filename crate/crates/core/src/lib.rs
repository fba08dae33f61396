//! Learning a reward model from a trainer's delayed scalar feedback.
//!
//! - [`credit`]: delay models and importance weights
//! - [`envsim`]: deterministic desk-scale environments
//! - [`model`]: linear and deep reward models, autoencoder pretraining
//! - [`learner`]: greedy acting, crediting, immediate and replay updates
//! - [`oracle`]: scripted trainers
//! - [`session`]: the training loop, logging and evaluation

pub mod credit;
pub mod envsim;
pub mod error;
pub mod learner;
pub mod model;
pub mod oracle;
pub mod session;

pub use error::{Error, Result};
