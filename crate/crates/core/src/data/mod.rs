//! Dataset ingestion, splitting, crop augmentation and the synthetic cell
//! image generator.

mod dataset;
mod image;
mod split;
pub mod synth;

pub use dataset::{
    batch_tensor, channel_stats, load_dataset, read_attribute_csv, write_attribute_csv, AttributeRow,
    DatasetManifest, Provenance, Record, ATTRIBUTES_FILE, DEFAULT_CLASSES, IMAGE_EXTENSIONS, PSEUDO_FILE,
    SCHEMA_FILE,
};
pub use image::{crop, CropMode, Image, CHANNELS};
pub use split::{apportion, split_622, SplitSpec, Splits};
pub use synth::{render, synth_generate, synth_plan, Domain, RenderParams, SynthConfig};

#[cfg(test)]
mod tests;
