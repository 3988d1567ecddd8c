//! On-disk corpora: a directory of PNG/PGM images plus `annotations.jsonl`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::patch::LabeledScene;
use super::synth::SyntheticScene;
use crate::density::{read_annotations, write_annotations, PointAnnotation};
use crate::error::{Error, Result};
use crate::image::Image;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "pnm"];

/// Image files in `dir`, sorted by file name, keyed by file stem.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every annotated image. Images without an annotation record are an error.
pub fn load_labeled_dir(dir: impl AsRef<Path>, channels: usize) -> Result<Vec<LabeledScene>> {
    let dir = dir.as_ref();
    let anns = read_annotations(dir.join(ANNOTATIONS_FILE))?;
    let images = list_images(dir)?;
    let missing: Vec<String> =
        images.iter().filter(|(id, _)| !anns.iter().any(|a| &a.image_id == id)).map(|(id, _)| id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotations(missing));
    }
    if anns.is_empty() {
        return Err(Error::EmptyDataset);
    }
    anns.into_iter()
        .map(|ann| {
            let path = images
                .iter()
                .find(|(id, _)| *id == ann.image_id)
                .map(|(_, p)| p.clone())
                .unwrap_or_else(|| dir.join(format!("{}.png", ann.image_id)));
            LabeledScene::new(Image::load(&path, channels)?, ann)
        })
        .collect()
}

/// Loads every image in `dir`, ignoring any annotations.
pub fn load_unlabeled_dir(dir: impl AsRef<Path>, channels: usize) -> Result<Vec<(String, Image)>> {
    let images = list_images(dir)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    images.into_iter().map(|(id, path)| Ok((id, Image::load(&path, channels)?))).collect()
}

/// Writes scenes as `<id>.png` plus one annotation file.
pub fn write_scenes(dir: impl AsRef<Path>, scenes: &[SyntheticScene]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in scenes {
        s.image.save_png(dir.join(format!("{}.png", s.annotation.image_id)))?;
    }
    let anns: Vec<PointAnnotation> = scenes.iter().map(|s| s.annotation.clone()).collect();
    write_annotations(dir.join(ANNOTATIONS_FILE), &anns)
}

/// Stable identifier: directory name plus a digest of the annotations and image names.
pub fn dataset_id(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut hasher = Sha256::new();
    let ann_path = dir.join(ANNOTATIONS_FILE);
    if ann_path.exists() {
        hasher.update(std::fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?);
    }
    for (id, _) in list_images(dir)? {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into());
    Ok(format!("{name}:{}", &hex::encode(hasher.finalize())[..12]))
}

/// SHA-256 of a file as lowercase hex.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
