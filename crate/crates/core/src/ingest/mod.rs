//! Manifests, feature matrices and image tensors.

pub mod features;
pub mod image;
pub mod manifest;

pub use features::{load_features, read_features, save_features, write_features, FeatureMatrix};
pub use image::{
    decode_pnm, encode_pnm, grayscale_transform, read_pnm_file, write_pnm_file, ImageTensor,
};
pub use manifest::{
    label_samples, load_manifest, read_manifest, write_manifest, Label, Sample, Split,
};
