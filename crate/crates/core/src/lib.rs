//! Multimodal cross-subject EEG emotion recognition.
//!
//! The crate is organised by stage:
//!
//! * [`nn`]: tensors, reverse-mode tape, layers, optimiser, gradient check.
//! * [`preprocess`]: filtering, resampling, reverse-anchored segmentation
//!   and differential-entropy features.
//! * [`mbsm`]: masked signal-modeling pretraining of a raw-EEG encoder.
//! * [`interlink`]: spatial/temporal attention blocks and the interlink
//!   blocks that cross-feed them, plus the eye-movement branch.
//! * [`fusion`]: unified projection, score-weighted pair fusion, final
//!   self-attention fusion and the classifier.
//! * [`pipeline`]: datasets, synthetic corpora, splits, training,
//!   evaluation, ablations and attention export.

pub mod container;
pub mod error;
pub mod fusion;
pub mod interlink;
pub mod mbsm;
pub mod nn;
pub mod pipeline;
pub mod preprocess;

pub use error::{Error, Result};
