//! Self-supervised multi-view contrastive pretraining for spectrogram-based
//! activity recognition.
//!
//! Two synchronized receivers observe the same activity instant; their
//! spectrograms form a positive pair under the NT-Xent objective. After
//! pretraining, projection heads are dropped, encoders are frozen and a small
//! classifier is fine-tuned on a handful of labelled examples.
//!
//! Modules, bottom-up:
//! - [`diffcore`]: tensors, reverse-mode gradients, finite-difference checks
//! - [`nn`]: encoders, projection heads, classifier, checkpoints
//! - [`signal`]: spectrograms, STFT, synthetic dataset generator, containers
//! - [`contrastive`]: cosine similarity and the NT-Xent loss
//! - [`train`]: optimizers, pretraining, fine-tuning, baselines, few-shot sampling
//! - [`eval`]: confusion matrices, macro F1, run comparison

pub mod contrastive;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod nn;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
