//! Keyword-spotting research workbench.
//!
//! The crate covers a full small-footprint experiment loop on a single CPU
//! core: waveform loading and deterministic augmentation, log-mel filterbank
//! features, a compressed convolutional front end with attention soft-pooling
//! feeding a transformer encoder, a contrastive / reconstruction loss family
//! for label-free pretraining, and a deterministic Adam trainer with
//! checkpointing, metrics logging, gradient checking, and step sweeps.
//!
//! Modules:
//! - [`audio`]: WAV I/O, speed/volume/noise augmentation, fbank extraction.
//! - [`data`]: manifests, segmentation, the synthetic keyword corpus, batches.
//! - [`model`]: network configuration, parameter store, forward and backward.
//! - [`loss`]: cross-entropy, contrastive losses, similarity, reconstruction.
//! - [`train`]: Adam, train loops, evaluation, gradient check, step sweep.
//! - [`cli`]: command-line front end binding everything together.

pub mod audio;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
