//! Image files, dataset manifests, synthetic data and augmentation.

mod augment;
mod io;
mod manifest;
mod synth;

pub use augment::{crop_and_augment, crop_origins, CropConfig, Dihedral};
pub use io::{load_image, save_image};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use synth::{synth_dataset, synth_ground_truth, synth_triple, SynthConfig, SynthTriple};
