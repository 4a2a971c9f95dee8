//! Synthetic scene worlds: grid scenes with templated captions, planted
//! co-occurrence shortcuts, counterfactual masking, and split files.

mod biased;
mod dataset;
mod world;

pub use biased::{build_biased_split, BiasClass, BiasSpec};
pub use dataset::{
    attach_cf_captions, build_counterfactual, build_dataset, generate_cf_caption, generate_cf_caption_with,
    read_dataset, read_manifest, read_split, write_dataset, write_split, Dataset, Manifest, SampleRecord,
    SceneExample, SplitEntry, MANIFEST_VERSION,
};
pub use world::{CoOccurrence, ObjectSpec, Scene, SceneConstraint, SplitSizes, World, WorldConfig};
