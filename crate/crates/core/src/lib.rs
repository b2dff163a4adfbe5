//! Generative thermal design: plate geometries, a finite-difference heat
//! solver, a rank-reduced variational autoencoder over geometries and
//! operator-learning heads that predict thermal fields from latent codes.

pub mod bench;
pub mod checkpoint;
pub mod deeponet;
pub mod geomgen;
mod hash;
pub mod heatfd;
pub mod metrics;
pub mod ndmath;
pub mod service;
pub mod vrrae;

pub use hash::{content_hash64, sha256_hex};
