//! Speaker-verification adversarial attack benchmark.
//!
//! Trains GMM-UBM / i-vector / PLDA recognisers and a toy x-vector network,
//! crafts FGSM perturbations against the i-vector trial score, transfers them
//! across features and architectures, and reports FAR/EER degradation.

pub mod archive;
pub mod attack;
pub mod audio;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fsutil;
pub mod gmm;
pub mod ivector;
pub mod numerics;
pub mod plda;
pub mod store;
pub mod trials;
pub mod xvector;

pub use error::{Error, Result};
