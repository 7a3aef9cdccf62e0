//! Multi-stream audio-visual deepfake detection with one-class learning.
//!
//! The crate implements a three-branch detector (audio, visual, audio-visual)
//! where each branch is trained independently on labels specific to its
//! modality. One-class softmax regularization compacts bonafide embeddings
//! around a learnable center so that unseen generation methods show up as
//! deviations. Inference fuses thresholded per-modality scores with the
//! audio-visual real-probability.
//!
//! Module map:
//! - [`types`] / [`manifest`]: sample records, labels, benchmark manifests
//! - [`frontend`]: MFCC extraction, frame preparation, desynchronization
//! - [`oc`]: one-class softmax loss and scores with analytic gradients
//! - [`nn`]: the small CPU layer stack (convs, linear, pooling, Adam)
//! - [`encoders`]: audio/visual feature extractors
//! - [`model`]: branch assembly, losses, score fusion
//! - [`media`] / [`dataset`]: raw-array media store, benchmark builders, toy corpus
//! - [`train`]: training loop, AUC selection, multi-seed evaluation
//! - [`config`] / [`report`] / [`commands`]: CLI plumbing and report emission

pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod frontend;
pub mod manifest;
pub mod media;
pub mod model;
pub mod nn;
pub mod oc;
pub mod report;
pub mod train;
pub mod types;

pub use error::{Error, Result};
