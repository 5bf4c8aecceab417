use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::case::{load_case, Case};
use super::nrrd::{write_mask, write_volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(path)?)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.entries)?)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries_with(&self, tag: SplitTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == tag)
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<Case> {
        let image = self.resolve(&e.image_path);
        let label = e.label_path.as_ref().map(|p| self.resolve(p));
        for p in std::iter::once(&image).chain(label.as_ref()) {
            if !p.exists() {
                return Err(Error::MissingInput(p.clone()));
            }
        }
        load_case(&e.id, &image, label.as_deref())
    }

    pub fn load(&self, tag: SplitTag) -> Result<Vec<Case>> {
        self.entries_with(tag).map(|e| self.load_entry(e)).collect()
    }
}

/// Writes cases as `<dir>/<id>/image.nrrd` (+ `label.nrrd`) and a
/// `manifest.json` tagging the first `train_count` cases as train.
pub fn write_dataset(dir: &Path, cases: &[Case], train_count: usize, gzip: bool) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let case_dir = dir.join(&c.id);
        fs::create_dir_all(&case_dir)?;
        let image_path = PathBuf::from(&c.id).join("image.nrrd");
        write_volume(&dir.join(&image_path), &c.volume, gzip)?;
        let label_path = match &c.label {
            Some(m) => {
                let p = PathBuf::from(&c.id).join("label.nrrd");
                write_mask(&dir.join(&p), m, c.volume.spacing(), gzip)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: c.id.clone(),
            image_path,
            label_path,
            split: if i < train_count { SplitTag::Train } else { SplitTag::Test },
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}
