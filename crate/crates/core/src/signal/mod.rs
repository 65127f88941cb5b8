//! Data layer: spectrograms, STFT ingestion, synthetic generation, splits and
//! the on-disk container.

pub mod container;
mod spectrogram;
mod split;
pub mod stft;
pub mod synth;

pub use container::{load_dataset, save_dataset, DatasetManifest};
pub use spectrogram::{class_counts, min_max_normalize, Activity, Modality, Spectrogram, SyncedSample, N_CLASSES};
pub use split::split_dataset;
pub use synth::{generate_synthetic_dataset, GeneratorParams, Profile};
