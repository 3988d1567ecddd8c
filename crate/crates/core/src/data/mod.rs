//! Synthetic scenes, labeled corpora, patch sampling and batch assembly.

mod batch;
mod corpus;
mod patch;
mod synth;

pub use batch::{assemble_batch, BatchConfig, BatchKind, Minibatch, RankingSet, Sources};
pub use corpus::{
    dataset_id, file_sha256, list_images, load_labeled_dir, load_unlabeled_dir, write_scenes, ANNOTATIONS_FILE,
};
pub use patch::{
    sample_labeled_patch, LabeledPatch, LabeledScene, PatchSampler, SideDistribution, MAX_PATCH_SIDE, MIN_PATCH_SIDE,
};
pub use synth::{generate_scene, CountDistribution, SceneParams, SyntheticScene, MAX_DENSITY};
