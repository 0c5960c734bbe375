//! Dataset ingestion, synthetic data, augmentation and episode sampling.

pub mod augment;
pub mod episode;
pub mod split;
pub mod synth;

pub use split::{DatasetError, DatasetSplit, SplitRole};
