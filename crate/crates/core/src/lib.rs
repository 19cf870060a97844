//! Density-operator latent variable models trained on classical hardware.
//!
//! Two training routes share this crate:
//!
//! * exact DO-EM over dense density operators (and its block-diagonal
//!   specialization) for small quantum Boltzmann machines, see [`doem`];
//! * contrastive-divergence training of quantum-interleaved deep Boltzmann
//!   machines, which never builds an operator and scales to image data,
//!   see [`qidbm`].

pub mod container;
pub mod data;
pub mod doem;
pub mod error;
pub mod linalg;
pub mod models;
pub mod qidbm;
pub mod qinfo;
pub mod rng;

pub use error::{Error, Result};
