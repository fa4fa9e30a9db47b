//! Implicit neural representations for audio.
//!
//! An INR maps a time coordinate in `[-1, 1]` to an amplitude. This crate builds six
//! such networks (ReLU MLP with positional encoding, SIREN, random Fourier features,
//! WIRE, FINER and a Kolmogorov-Arnold network with learnable B-spline edges), fits
//! them to waveforms with an L1 + multi-resolution mel-STFT objective, evaluates the
//! reconstructions, and meta-trains a hypernetwork that predicts per-clip weight
//! updates for a shared INR.
//!
//! Everything differentiable runs on the small reverse-mode engine in [`tensor`].

pub mod audio;
pub mod bspline;
pub mod error;
pub mod fewsound;
pub mod inr;
pub mod loss;
pub mod metrics;
pub mod modelfile;
pub mod optim;
pub mod stft;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
