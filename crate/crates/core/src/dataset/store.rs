use super::{CoverageCategory, PatchSample, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::raster::{self, PatchOrigin, PATCH_SIZE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub source: String,
    pub origin: PatchOrigin,
    pub coverage_px: usize,
    pub category: CoverageCategory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchIndex {
    pub patch_size: usize,
    pub entries: Vec<IndexEntry>,
}

impl Default for PatchIndex {
    fn default() -> Self {
        PatchIndex {
            patch_size: PATCH_SIZE,
            entries: Vec::new(),
        }
    }
}

/// Directory of `<id>.img.png` / `<id>.tgt.png` pairs plus `index.json`.
#[derive(Clone, Debug)]
pub struct PatchStore {
    dir: PathBuf,
}

impl PatchStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        PatchStore { dir: dir.into() }
    }

    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(PatchStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.img.png"))
    }

    pub fn target_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.tgt.png"))
    }

    /// Reads the index, or an empty one if none has been written yet.
    pub fn load_index(&self) -> Result<PatchIndex> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(PatchIndex::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save_index(&self, index: &PatchIndex) -> Result<()> {
        let path = self.index_path();
        let text = serde_json::to_string_pretty(index).expect("index serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Writes the PNG pair for a sample and returns its index entry.
    pub fn write_sample(
        &self,
        sample: &PatchSample,
        source: &str,
        origin: PatchOrigin,
    ) -> Result<IndexEntry> {
        raster::save_rgb(&sample.image, self.image_path(&sample.id))?;
        raster::save_mask(&sample.target, self.target_path(&sample.id))?;
        Ok(IndexEntry {
            id: sample.id.clone(),
            source: source.to_string(),
            origin,
            coverage_px: sample.coverage_px,
            category: sample.category,
        })
    }

    /// Merges entries into the on-disk index; later entries replace earlier
    /// ones with the same id. The index stays sorted by id.
    pub fn merge_index(&self, entries: Vec<IndexEntry>) -> Result<PatchIndex> {
        let mut index = self.load_index()?;
        let mut by_id: BTreeMap<String, IndexEntry> = index
            .entries
            .drain(..)
            .map(|e| (e.id.clone(), e))
            .collect();
        for e in entries {
            by_id.insert(e.id.clone(), e);
        }
        index.entries = by_id.into_values().collect();
        self.save_index(&index)?;
        Ok(index)
    }

    pub fn load_sample(&self, id: &str) -> Result<PatchSample> {
        let image = raster::load_rgb(self.image_path(id))?;
        let target = raster::load_mask(self.target_path(id))?;
        PatchSample::new(id, image, target)
    }

    /// Loads every sample the manifest assigns to `split`, in manifest order.
    pub fn load_split(&self, manifest: &SplitManifest, split: Split) -> Result<Vec<PatchSample>> {
        manifest
            .ids(split)
            .map(|id| {
                let mut s = self.load_sample(id)?;
                s.split = split;
                Ok(s)
            })
            .collect()
    }
}
