//! Self-supervised voice-identity embeddings.
//!
//! The crate covers the whole desk-scale pipeline: waveform features
//! ([`dsp`]), waveform augmentation ([`augment`]), dataset handling and
//! positive-pair batching ([`pairs`]), the self-supervised objectives
//! ([`losses`]), the encoder and its training loop ([`model`], [`train`]),
//! and the similarity / identification evaluation protocols ([`metrics`]).

pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod dsp;
pub mod embed;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pairs;
pub mod rng;
pub mod train;


pub use linalg::Matrix;
