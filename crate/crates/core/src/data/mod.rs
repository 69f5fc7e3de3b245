//! Dataset ingestion: manifests, image decoding, splits and the synthetic
//! generator.

mod manifest;
mod sample;
mod synthetic;

pub use manifest::{load_manifest, parse_manifest, split_dataset, DatasetPreset, Manifest, ManifestEntry, Split, PRESETS};
pub use sample::{image_tensor, load_sample, load_samples, mask_tensor, stack_batch, Sample, MASK_THRESHOLD};
pub use synthetic::{generate_synthetic, synthesize, Ellipse, SyntheticSample};
