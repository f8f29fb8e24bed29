//! Dataset manifest: a JSON index of cases and their per-phase files.
//!
//! ```json
//! {"seed": 7, "cases": [{"id": "a-0", "label": 1,
//!   "phases": {"arterial": {"vol": "cases/a-0/arterial.raw", "mask": "cases/a-0/arterial_mask.raw"},
//!              "venous": {"vol": "cases/a-0/venous.raw"}}}]}
//! ```
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mask, read_volume};
use crate::volume::{CaseRecord, Phase, PhaseData};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseFiles {
    pub vol: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// 0 normal, 1 abnormal.
    pub label: u8,
    pub phases: BTreeMap<Phase, PhaseFiles>,
}

impl ManifestEntry {
    pub fn abnormal(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub cases: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>, seed: Option<u64>) -> Self {
        DatasetManifest {
            seed,
            cases: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entry(&self, case_id: &str) -> Result<&ManifestEntry> {
        self.cases
            .iter()
            .find(|e| e.id == case_id)
            .ok_or_else(|| Error::UnknownCase(case_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().map(|e| e.id.as_str())
    }

    /// Appends the entries of `other`, rebasing its relative paths.
    pub fn merge(&mut self, other: DatasetManifest) -> Result<()> {
        for mut e in other.cases {
            for files in e.phases.values_mut() {
                files.vol = other.base_dir.join(&files.vol);
                files.mask = files.mask.take().map(|m| other.base_dir.join(m));
            }
            self.cases.push(e);
        }
        self.check_unique()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.cases {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateCase(e.id.clone()));
            }
        }
        Ok(())
    }

    /// Structural checks: unique ids, labels in {0,1}, at least one phase,
    /// and every referenced file present on disk.
    pub fn validate(&self) -> Result<()> {
        self.check_unique()?;
        for e in &self.cases {
            if e.label > 1 {
                return Err(Error::InvalidArgument(format!(
                    "case `{}` has label {} (expected 0 or 1)",
                    e.id, e.label
                )));
            }
            if e.phases.is_empty() {
                return Err(Error::InvalidArgument(format!("case `{}` lists no phases", e.id)));
            }
            for files in e.phases.values() {
                for p in std::iter::once(&files.vol).chain(files.mask.as_ref()) {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(Error::io(
                            full,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

pub fn load_case(manifest: &DatasetManifest, case_id: &str) -> Result<CaseRecord> {
    let entry = manifest.entry(case_id)?;
    let mut phases = BTreeMap::new();
    for (&phase, files) in &entry.phases {
        let volume = read_volume(&manifest.resolve(&files.vol))?;
        let mask = match &files.mask {
            Some(p) => Some(read_mask(&manifest.resolve(p))?),
            None => None,
        };
        phases.insert(phase, PhaseData { volume, mask });
    }
    let case = CaseRecord {
        case_id: entry.id.clone(),
        phases,
        abnormal: entry.abnormal(),
    };
    case.validate()?;
    Ok(case)
}

/// Loads every case in manifest order.
pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<CaseRecord>> {
    manifest.ids().map(|id| load_case(manifest, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_mask, write_volume};
    use crate::volume::{Dims, LabelMask, Volume3D};

    fn write_case(dir: &Path, id: &str, vol_dims: Dims, mask_dims: Dims) -> ManifestEntry {
        let v = dir.join(format!("{id}_v.raw"));
        let m = dir.join(format!("{id}_m.raw"));
        write_volume(&Volume3D::filled(vol_dims, -50), &v).unwrap();
        write_mask(&LabelMask::background(mask_dims), &m, [1.0; 3]).unwrap();
        let mut phases = BTreeMap::new();
        phases.insert(
            Phase::Venous,
            PhaseFiles {
                vol: format!("{id}_v.raw").into(),
                mask: Some(format!("{id}_m.raw").into()),
            },
        );
        ManifestEntry {
            id: id.into(),
            label: 0,
            phases,
        }
    }

    #[test]
    fn lookup_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::cube(3).unwrap();
        let mut m = DatasetManifest::new(dir.path(), Some(1));
        m.cases.push(write_case(dir.path(), "a", d, d));
        m.cases.push(write_case(dir.path(), "b", d, d));
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.cases, m.cases);
        assert_eq!(load_case(&loaded, "a").unwrap().case_id, "a");
        assert_eq!(load_case(&loaded, "b").unwrap().case_id, "b");
        assert!(matches!(load_case(&loaded, "zzz"), Err(Error::UnknownCase(_))));
    }

    #[test]
    fn mask_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path(), None);
        m.cases
            .push(write_case(dir.path(), "a", Dims::cube(3).unwrap(), Dims::cube(2).unwrap()));
        assert!(matches!(load_case(&m, "a"), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::cube(2).unwrap();
        let mut m = DatasetManifest::new(dir.path(), None);
        m.cases.push(write_case(dir.path(), "a", d, d));
        m.cases.push(write_case(dir.path(), "a", d, d));
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::DuplicateCase(_))));
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::cube(2).unwrap();
        let mut m = DatasetManifest::new(dir.path(), None);
        m.cases.push(write_case(dir.path(), "a", d, d));
        fs::remove_file(dir.path().join("a_m.raw")).unwrap();
        assert!(matches!(m.validate(), Err(Error::Io { .. })));
    }
}
