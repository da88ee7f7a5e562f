//! Dataset manifests and the synthetic lesion task.
//!
//! A manifest is a JSON array of `{"image", "label", "split"}` objects.
//! Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcleaf_core::synth::{synth_scene, AnnotatedImage, SynthSceneConfig};

use crate::yolo::{load_yolo_txt, write_image, write_labels, YoloError};

/// Scene seeds of the validation split start here so the two splits never
/// share a scene.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub image: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Yolo(#[from] YoloError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn read_manifest(path: &Path) -> Result<Vec<Entry>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Manifest { path: path.display().to_string(), msg: e.to_string() })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Every sample of one split, in manifest order.
pub fn load_split(manifest: &Path, split: Split, num_classes: usize) -> Result<Vec<AnnotatedImage>, DatasetError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| Ok(load_yolo_txt(&resolve(base, &e.image), &resolve(base, &e.label), num_classes)?))
        .collect()
}

/// Scene seed of sample `i` of a split for a given data seed.
pub fn scene_seed(data_seed: u64, split: Split, i: usize) -> u64 {
    let base = data_seed.wrapping_mul(10 * VAL_SEED_OFFSET);
    match split {
        Split::Train => base + i as u64,
        Split::Val => base + VAL_SEED_OFFSET + i as u64,
        Split::Test => base + 2 * VAL_SEED_OFFSET + i as u64,
    }
}

/// `count` toy scenes of one split, generated in memory.
pub fn synth_split(count: usize, data_seed: u64, split: Split) -> Vec<AnnotatedImage> {
    (0..count).map(|i| synth_scene(&SynthSceneConfig::toy(scene_seed(data_seed, split, i))).sample).collect()
}

/// Writes `images/*.png`, `labels/*.txt` and `manifest.json` under `dir`
/// and returns the manifest path.
pub fn write_synth_dataset(dir: &Path, n_train: usize, n_val: usize, data_seed: u64) -> Result<PathBuf, DatasetError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| DatasetError::Io { path, source }
    };
    for sub in ["images", "labels"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let mut entries = Vec::new();
    for (split, n, tag) in [(Split::Train, n_train, "train"), (Split::Val, n_val, "val")] {
        for (i, s) in synth_split(n, data_seed, split).iter().enumerate() {
            let image = format!("images/{tag}_{i:04}.png");
            let label = format!("labels/{tag}_{i:04}.txt");
            write_image(&dir.join(&image), &s.image)?;
            write_labels(&dir.join(&label), &s.boxes)?;
            entries.push(Entry { image, label, split });
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&entries).expect("manifest serialises")).map_err(io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_never_share_scenes() {
        for seed in 0..3 {
            assert_ne!(scene_seed(seed, Split::Train, 999_999), scene_seed(seed, Split::Val, 0));
            assert!(scene_seed(seed + 1, Split::Train, 0) > scene_seed(seed, Split::Test, 999_999));
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synth_dataset(dir.path(), 3, 2, 7).unwrap();
        let train = load_split(&m, Split::Train, 3).unwrap();
        let val = load_split(&m, Split::Val, 3).unwrap();
        assert_eq!((train.len(), val.len()), (3, 2));
        let mem = synth_split(3, 7, Split::Train);
        for (a, b) in train.iter().zip(&mem) {
            assert_eq!(a.boxes.len(), b.boxes.len());
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
        assert!(load_split(&dir.path().join("missing.json"), Split::Train, 3).is_err());
    }
}
