//! Multi-view datasets: validation, file manifests, normalization and
//! synthetic generators.

mod dataset;
mod manifest;
mod normalize;
mod synth;

pub use dataset::MultiViewDataset;
pub use manifest::{load_dataset, save_dataset, DatasetManifest, Encoding, LabelsEntry, ViewEntry};
pub use normalize::{normalize, Normalization};
pub use synth::{make_blobs, SynthSpec};
