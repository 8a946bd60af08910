//! Locating cases, images, masks and dose plans in a directory.
//!
//! A directory is either a dataset (it has `manifest.json` and per-split
//! subdirectories) or a flat directory of `<id>`, `<id>_mask` and `<id>_dose`
//! volume pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use soars_core::phantom::{CaseEntry, DatasetManifest, Split};

use crate::error::{CliError, Result};

pub enum CaseDir {
    Dataset { dir: PathBuf, cases: BTreeMap<String, CaseEntry> },
    Flat { dir: PathBuf },
}

const SUFFIXES: [&str; 2] = ["_mask", "_dose"];

impl CaseDir {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CliError::Io(format!("{}: not a directory", dir.display())));
        }
        if dir.join("manifest.json").is_file() {
            let m = DatasetManifest::load(dir)?;
            let cases = m.cases.into_iter().map(|c| (c.id.clone(), c)).collect();
            Ok(CaseDir::Dataset { dir: dir.to_path_buf(), cases })
        } else {
            Ok(CaseDir::Flat { dir: dir.to_path_buf() })
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            CaseDir::Dataset { dir, .. } | CaseDir::Flat { dir } => dir,
        }
    }

    fn base(&self, id: &str) -> PathBuf {
        match self {
            CaseDir::Dataset { dir, cases } => match cases.get(id) {
                Some(c) => dir.join(c.split.dir()).join(id),
                None => dir.join(id),
            },
            CaseDir::Flat { dir } => dir.join(id),
        }
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.base(id)
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        let b = self.base(id);
        b.with_file_name(format!("{id}_mask"))
    }

    pub fn dose_path(&self, id: &str) -> PathBuf {
        let b = self.base(id);
        b.with_file_name(format!("{id}_dose"))
    }

    /// Case ids, sorted. Datasets are filtered by `split` when given; flat
    /// directories list every `<id>.json` sidecar with a matching suffix
    /// (`""` for images, `"_mask"` for masks).
    pub fn ids(&self, split: Option<Split>, suffix: &str) -> Result<Vec<String>> {
        match self {
            CaseDir::Dataset { cases, .. } => {
                Ok(cases.values().filter(|c| split.is_none_or(|s| c.split == s)).map(|c| c.id.clone()).collect())
            }
            CaseDir::Flat { dir } => {
                let mut ids = Vec::new();
                for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
                    let p = entry.map_err(|e| CliError::io(dir, e))?.path();
                    let (Some(stem), Some("json")) = (p.file_stem().and_then(|s| s.to_str()), p.extension().and_then(|s| s.to_str()))
                    else {
                        continue;
                    };
                    if !p.with_extension("raw").is_file() {
                        continue;
                    }
                    let id = if suffix.is_empty() {
                        if SUFFIXES.iter().any(|s| stem.ends_with(s)) {
                            continue;
                        }
                        stem
                    } else {
                        match stem.strip_suffix(suffix) {
                            Some(id) => id,
                            None => continue,
                        }
                    };
                    ids.push(id.to_string());
                }
                ids.sort();
                Ok(ids)
            }
        }
    }
}

pub fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(CliError::Config(format!("--split {other}: expected train, val, test or all"))),
    }
}
