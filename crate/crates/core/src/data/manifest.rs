//! JSON-lines slice manifests.

use super::slice::{read_header, SliceRecord, Split};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub label: Option<String>,
    pub split: Split,
    pub spacing: [f32; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// Split rule used when building manifests: every fifth slice is validation.
pub fn split_for(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Val
    } else {
        Split::Train
    }
}

impl Manifest {
    /// Indexes every `*.md3s` file in `root` (sorted by name).
    pub fn build(root: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "md3s"))
            .collect();
        files.sort();
        let mut records = Vec::with_capacity(files.len());
        for (i, f) in files.iter().enumerate() {
            let (_, _, spacing, has_label) = read_header(f)?;
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            records.push(ManifestRecord {
                label: has_label.then(|| name.clone()),
                image: name,
                split: split_for(i),
                spacing: [spacing.0 as f32, spacing.1 as f32],
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Parses without touching the referenced files.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    /// Reads a manifest and validates the header of every referenced file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = Self::parse(&text, &root)?;
        let mut line = 0;
        for (i, l) in text.lines().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let r = &m.records[line];
            line += 1;
            let fail = |e: Error| Error::Manifest { line: i + 1, msg: e.to_string() };
            let (_, _, _, has_label) = read_header(&m.root.join(&r.image)).map_err(fail)?;
            if let Some(lbl) = &r.label {
                let (_, _, _, lab) = read_header(&m.root.join(lbl)).map_err(fail)?;
                if !lab {
                    return Err(fail(Error::format(m.root.join(lbl), "no LBL0 block")));
                }
            } else if has_label {
                log::debug!("line {}: image has labels but the manifest lists none", i + 1);
            }
        }
        Ok(m)
    }

    pub fn image_path(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.image)
    }

    /// Reads one record's slice, with labels taken from its label file.
    pub fn read_slice(&self, r: &ManifestRecord) -> Result<SliceRecord> {
        let mut s = SliceRecord::read(&self.image_path(r))?;
        s.label = match &r.label {
            None => None,
            Some(l) if *l == r.image => s.label,
            Some(l) => SliceRecord::read(&self.root.join(l))?.label,
        };
        s.split = r.split;
        Ok(s)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}
