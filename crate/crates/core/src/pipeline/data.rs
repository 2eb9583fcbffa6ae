use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::synthetic::{generate_scene, write_sample, SceneConfig, MANIFEST_FILE};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub seed: u64,
    /// CRC32 of every file in the sample directory.
    pub files: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub config_hash: String,
    pub base_seed: u64,
    /// Scene settings shared by every sample (seed is the base seed).
    pub scene: SceneConfig,
    pub samples: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn sample_id(i: usize) -> String {
    format!("sample_{i:04}")
}

/// Writes `count` scenes seeded `seed, seed + 1, …`, a train/test split and
/// a dataset manifest. A non-empty `out_dir` is replaced only with `force`.
pub fn cmd_make_data(cfg: &RunConfig, out_dir: &Path, count: usize, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::Refusal(format!(
                    "{} is not empty; pass --force to overwrite it",
                    out_dir.display()
                )));
            }
            std::fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let base_seed = cfg.optim.seed;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64);
        let scene = generate_scene(&cfg.scene_config(seed)?)?;
        let id = sample_id(i);
        let manifest = write_sample(&scene, &out_dir.join(&id))?;
        let mut files = manifest.files.clone();
        let mbytes = std::fs::read(out_dir.join(&id).join(MANIFEST_FILE)).map_err(|e| Error::io(out_dir, e))?;
        files.insert(MANIFEST_FILE.to_string(), crc32fast::hash(&mbytes));
        samples.push(DatasetEntry { id, seed, files });
    }
    let n_test = ((count as f64) * cfg.data.test_fraction).round() as usize;
    let n_train = count - n_test.min(count);
    let split = Split {
        train: samples[..n_train].iter().map(|s| s.id.clone()).collect(),
        test: samples[n_train..].iter().map(|s| s.id.clone()).collect(),
    };
    let manifest = DatasetManifest {
        count,
        config_hash: cfg.hash(),
        base_seed,
        scene: cfg.scene_config(base_seed)?,
        samples,
    };
    write_atomic(&out_dir.join(SPLIT_FILE), &serde_json::to_vec_pretty(&split)?)?;
    write_atomic(&out_dir.join(DATASET_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    log::info!("wrote {count} samples ({n_train} train, {} test) to {}", count - n_train, out_dir.display());
    Ok(manifest)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&path, e.to_string()))
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let path = dir.join(SPLIT_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::integrity(&path, e.to_string()))
}

/// Sorted `(id, path)` of subdirectories of `dir` that contain `marker`.
pub fn list_samples(dir: &Path, marker: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(marker).is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::read_sample;

    #[test]
    fn writes_count_samples_with_split_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let cfg = RunConfig::default();
        let m = cmd_make_data(&cfg, &out, 4, false).unwrap();
        assert_eq!(m.samples.len(), 4);
        assert_eq!(list_samples(&out, MANIFEST_FILE).unwrap().len(), 4);
        let split = read_split(&out).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (3, 1));
        assert_eq!(read_dataset_manifest(&out).unwrap(), m);
        assert_eq!(read_sample(&out.join("sample_0002")).unwrap().seed, 2);
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let cfg = RunConfig::default();
        assert!(matches!(cmd_make_data(&cfg, dir.path(), 1, false), Err(Error::Refusal(_))));
        cmd_make_data(&cfg, dir.path(), 1, true).unwrap();
        assert!(!dir.path().join("keep.txt").exists());
    }

    #[test]
    fn empty_dataset_has_a_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = cmd_make_data(&RunConfig::default(), &dir.path().join("e"), 0, false).unwrap();
        assert_eq!((m.count, m.samples.len()), (0, 0));
        assert_eq!(read_split(&dir.path().join("e")).unwrap(), Split::default());
    }
}
