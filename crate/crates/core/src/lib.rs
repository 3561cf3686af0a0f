//! Unsupervised multichannel speech enhancement.
//!
//! The crate fits a multichannel nonnegative matrix factorization model to a
//! noisy multichannel recording, extracts speech/noise spatial covariance
//! matrices and steering vectors from the fitted parameters, and applies one
//! of six beamformer variants (full-rank or rank-1 multichannel Wiener
//! filter, or MVDR; each time-variant or time-invariant), offline or in
//! mini-batch streaming mode. A synthetic-scene harness provides seeded
//! ground truth and scale-invariant SDR scoring for verification.
//!
//! All numerics are generic over the [`scalar::Scalar`] float type; the
//! aliases below fix the default `f64` instantiation.

pub mod beamform;
pub mod harness;
pub mod error;
pub mod hermitian;
pub mod ilrma;
pub mod mnmf;
pub mod pipeline;
pub mod scalar;
pub mod spatial;
pub mod stft;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for end-to-end processing.
pub type DefaultScalar = f64;

pub type WaveformBlock64 = stft::WaveformBlock<f64>;
pub type Spectrogram64 = stft::Spectrogram<f64>;
pub type HermitianMatrix64 = hermitian::HermitianMatrix<f64>;
pub type MnmfParams64 = mnmf::MnmfParams<f64>;
pub type SpatialEstimates64 = spatial::SpatialEstimates<f64>;
pub type EnhanceConfig64 = pipeline::EnhanceConfig<f64>;

pub type WaveformBlock32 = stft::WaveformBlock<f32>;
pub type Spectrogram32 = stft::Spectrogram<f32>;
pub type HermitianMatrix32 = hermitian::HermitianMatrix<f32>;
