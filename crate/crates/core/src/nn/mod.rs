//! Layers, encoders and the per-view model bundle.

pub mod bundle;
pub mod checkpoint;
pub mod encoder;
pub mod layers;

pub use bundle::{stack_view, Bound, BundleConfig, Component, Fusion, ModelBundle, Parts, CLASSIFIER_HIDDEN, PROJECTION_DIM};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use encoder::{Activation, Architecture, Encoder, EncoderConfig};
pub use layers::{BatchNorm2d, BatchStats, Conv2d, Linear, Mlp};
