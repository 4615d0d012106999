//! Synthetic data, dataset files and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod synthetic;

pub use checkpoint::CheckpointError;
pub use dataset::{DataError, Dataset, DatasetManifest, PatchSet};
pub use synthetic::{Samples, Task};
