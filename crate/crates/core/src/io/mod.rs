//! Checkpoints, model configs, dataset manifests and tensor bundles.

pub mod checkpoint;
pub mod config;
pub mod dataset;

pub use checkpoint::{load_checkpoint, load_mel, save_checkpoint, save_mel, TrainingMeta, FORMAT_VERSION};
pub use config::{load_config, ModelConfig, PermutationStrategy, PRESET_NAMES};
pub use dataset::{read_dataset_manifest, write_dataset_manifest, DatasetEntry};
