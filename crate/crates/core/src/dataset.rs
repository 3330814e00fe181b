//! Collections of task families, either generated on demand or written to
//! disk as VOLB pairs with a manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{generate_sample, mix_seed, split_family, FamilySplit, TaskFamily};
use crate::volb;
use crate::volume::{Mask3D, Shape3, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub shape: [usize; 3],
    pub train_families: usize,
    pub heldout_families: usize,
    pub samples_per_family: usize,
    pub n_context_pool: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            shape: [32, 32, 32],
            train_families: 8,
            heldout_families: 3,
            samples_per_family: 32,
            n_context_pool: 16,
            n_eval: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        Shape3(self.shape).validate().map_err(|e| Error::config("data.shape", e.to_string()))?;
        if self.train_families + self.heldout_families == 0 {
            return Err(Error::config("data.train_families", "at least one family is required"));
        }
        if self.n_context_pool + self.n_eval > self.samples_per_family {
            return Err(Error::config(
                "data.samples_per_family",
                format!("must cover n_context_pool + n_eval = {}", self.n_context_pool + self.n_eval),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyRole {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub index: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub name: String,
    pub role: FamilyRole,
    pub family: TaskFamily,
    pub split: FamilySplit,
    /// Empty when samples are generated on demand.
    #[serde(default)]
    pub samples: Vec<SampleFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DataConfig,
    pub families: Vec<FamilyEntry>,
}

impl DatasetManifest {
    pub fn build(config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let shape = Shape3(config.shape);
        let total = config.train_families + config.heldout_families;
        let families = (0..total)
            .map(|i| {
                let role = if i < config.train_families { FamilyRole::Train } else { FamilyRole::Heldout };
                let family = TaskFamily::random(mix_seed(config.seed, i as u64), config.samples_per_family, shape);
                let split = split_family(&family, config.n_context_pool, config.n_eval)?;
                let name = match role {
                    FamilyRole::Train => format!("train{i:03}"),
                    FamilyRole::Heldout => format!("heldout{:03}", i - config.train_families),
                };
                Ok(FamilyEntry { name, role, family, split, samples: Vec::new() })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest { config: config.clone(), families })
    }
}

type Sample = (Volume3D<f32>, Mask3D);

/// Task families plus access to their samples.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: Option<PathBuf>,
    cache: Option<Mutex<HashMap<(usize, usize), Sample>>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub(crate) fn workers() -> usize {
    std::env::var("WSICL_NUM_WORKERS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

impl Dataset {
    /// Generates samples on demand, optionally memoizing them.
    pub fn synthetic(config: &DataConfig, cache: bool) -> Result<Self> {
        Ok(Dataset { manifest: DatasetManifest::build(config)?, root: None, cache: cache.then(Default::default) })
    }

    /// Generates every sample and writes VOLB pairs plus `manifest.json`
    /// under `out`. Uses `WSICL_NUM_WORKERS` threads (0 = serial).
    pub fn write(config: &DataConfig, out: &Path) -> Result<Self> {
        let mut manifest = DatasetManifest::build(config)?;
        let jobs: Vec<(usize, usize)> = manifest
            .families
            .iter()
            .enumerate()
            .flat_map(|(f, e)| (0..e.family.n_samples).map(move |i| (f, i)))
            .collect();
        let write_one = |&(f, i): &(usize, usize)| -> Result<SampleFiles> {
            let entry = &manifest.families[f];
            let (img, mask) = generate_sample(&entry.family, i)?;
            let image = format!("{}/img_{i:04}.volb", entry.name);
            let mask_rel = format!("{}/mask_{i:04}.volb", entry.name);
            volb::save_volume(&out.join(&image), &img)?;
            volb::save_mask(&out.join(&mask_rel), &mask)?;
            Ok(SampleFiles { index: i, image, mask: mask_rel })
        };
        let n = workers();
        let files: Vec<Result<SampleFiles>> = if n <= 1 {
            jobs.iter().map(write_one).collect()
        } else {
            let chunk = jobs.len().div_ceil(n);
            std::thread::scope(|s| {
                let handles: Vec<_> =
                    jobs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(write_one).collect::<Vec<_>>())).collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        for (&(f, _), file) in jobs.iter().zip(files) {
            manifest.families[f].samples.push(file?);
        }
        let path = out.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset { manifest, root: Some(out.to_owned()), cache: Some(Default::default()) })
    }

    /// Opens a manifest written by [`Dataset::write`] (a directory or the
    /// manifest file itself).
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_owned() };
        let raw = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&raw).map_err(|e| Error::Json { path: file.clone(), source: e })?;
        manifest.config.validate()?;
        for e in &manifest.families {
            if e.split.pool.iter().any(|i| e.split.eval.contains(i)) {
                return Err(Error::Format { path: file.clone(), reason: format!("family {} split overlaps", e.name) });
            }
        }
        let root = file.parent().map(Path::to_owned).unwrap_or_default();
        Ok(Dataset { manifest, root: Some(root), cache: Some(Default::default()) })
    }

    pub fn families(&self) -> &[FamilyEntry] {
        &self.manifest.families
    }

    pub fn by_role(&self, role: FamilyRole) -> Vec<usize> {
        (0..self.manifest.families.len()).filter(|&i| self.manifest.families[i].role == role).collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.manifest.families.iter().position(|e| e.name == name)
    }

    fn load(&self, family: usize, index: usize) -> Result<Sample> {
        let entry = &self.manifest.families[family];
        match (&self.root, entry.samples.iter().find(|s| s.index == index)) {
            (Some(root), Some(files)) => {
                let img = volb::load_volume(&root.join(&files.image))?;
                let mask = volb::load_mask(&root.join(&files.mask))?;
                Ok((img, mask))
            }
            _ => generate_sample(&entry.family, index),
        }
    }

    /// Image and mask of sample `index` in family `family`.
    pub fn sample(&self, family: usize, index: usize) -> Result<Sample> {
        let Some(cache) = &self.cache else { return self.load(family, index) };
        if let Some(s) = cache.lock().expect("cache lock").get(&(family, index)) {
            return Ok(s.clone());
        }
        let s = self.load(family, index)?;
        cache.lock().expect("cache lock").insert((family, index), s.clone());
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            shape: [8, 8, 8],
            train_families: 2,
            heldout_families: 1,
            samples_per_family: 6,
            n_context_pool: 3,
            n_eval: 2,
            seed: 4,
        }
    }

    #[test]
    fn written_dataset_matches_generated() {
        let dir = tempfile::tempdir().unwrap();
        let written = Dataset::write(&small(), dir.path()).unwrap();
        let reopened = Dataset::open(dir.path()).unwrap();
        let generated = Dataset::synthetic(&small(), false).unwrap();
        assert_eq!(reopened.manifest, written.manifest);
        assert_eq!(reopened.families().len(), 3);
        for f in 0..3 {
            for i in 0..6 {
                assert_eq!(reopened.sample(f, i).unwrap(), generated.sample(f, i).unwrap());
            }
        }
        assert_eq!(reopened.by_role(FamilyRole::Heldout), vec![2]);
    }

    #[test]
    fn config_rejects_oversized_split() {
        let c = DataConfig { n_context_pool: 5, ..small() };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { .. })));
    }
}
