//! MCGA: multi-scale codebook learning with grayscale-aware attention for
//! RGB-to-hyperspectral reconstruction.
//!
//! The crate is organised around a small reverse-mode autodiff tape
//! ([`tensor`]) on which everything else is built: vector-quantization
//! codebooks and their losses ([`codebook`]), the stage-1 multi-scale VQ
//! autoencoder ([`msvqvae`]), the stage-2 grayscale-aware reconstruction
//! network ([`ganet`]), entropy-minimizing test-time adaptation ([`tta`]),
//! synthetic data and image metrics ([`data`], [`metrics`]), binary model and
//! cube formats ([`io`]), and the shared optimizer ([`optim`]).

pub mod codebook;
pub mod data;
pub mod error;
pub mod ganet;
pub mod io;
pub mod metrics;
pub mod msvqvae;
pub mod optim;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
