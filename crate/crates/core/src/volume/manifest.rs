//! Dataset manifest: which subject has which labels, and in which split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One subject. Paths are relative to the manifest's directory unless absolute.
///
/// An absent label is an omitted field; a present-but-empty label is a real
/// all-background mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wmh_label: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isl_label: Option<PathBuf>,
    pub brain_mask: PathBuf,
    pub split: Split,
    /// Source cohort, used for per-dataset grouping of results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
    /// Anatomical region map consumed by the lesion-visibility screen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_map: Option<PathBuf>,
    /// Labels that were filled in by a teacher model rather than annotated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pseudo_labels: Vec<String>,
}

impl SampleRecord {
    pub fn has_wmh(&self) -> bool {
        self.wmh_label.is_some()
    }

    pub fn has_isl(&self) -> bool {
        self.isl_label.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Id lists of the training subsets, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Subsets {
    /// Train records with both labels.
    pub fls: Vec<String>,
    pub pls_wmh: Vec<String>,
    pub pls_isl: Vec<String>,
    /// `pls_wmh ∪ pls_isl`.
    pub pls_all: Vec<String>,
}

impl Manifest {
    pub fn new(dataset_name: impl Into<String>, samples: Vec<SampleRecord>) -> Result<Self> {
        let m = Self {
            dataset_name: dataset_name.into(),
            samples,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    /// Resolves a record path against the manifest location.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(Error::Manifest("empty sample id".into()));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {:?}", s.id)));
            }
            if s.split == Split::Train && !s.has_wmh() && !s.has_isl() {
                return Err(Error::Manifest(format!(
                    "train sample {:?} has neither a WMH nor an ISL label",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn derive_subsets(&self) -> Subsets {
        let mut out = Subsets::default();
        for s in self.split(Split::Train) {
            if s.has_wmh() && s.has_isl() {
                out.fls.push(s.id.clone());
            }
            if s.has_wmh() {
                out.pls_wmh.push(s.id.clone());
            }
            if s.has_isl() {
                out.pls_isl.push(s.id.clone());
            }
            if s.has_wmh() || s.has_isl() {
                out.pls_all.push(s.id.clone());
            }
        }
        out
    }
}

/// Intracranial volume from a brain mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Icv {
    pub voxels: usize,
    pub ml: f64,
}

pub fn icv_voxels(brain_mask: &Mask) -> Result<Icv> {
    let voxels = brain_mask.count();
    if voxels == 0 {
        return Err(Error::Data("brain mask is empty; ICV cannot be zero".into()));
    }
    Ok(Icv {
        voxels,
        ml: voxels as f64 * brain_mask.geom().voxel_volume_mm3() / 1000.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    pub(crate) fn record(id: &str, wmh: bool, isl: bool, split: Split) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image: format!("{id}.nii.gz").into(),
            wmh_label: wmh.then(|| format!("{id}_wmh.nii.gz").into()),
            isl_label: isl.then(|| format!("{id}_isl.nii.gz").into()),
            brain_mask: format!("{id}_brain.nii.gz").into(),
            split,
            cohort: None,
            region_map: None,
            pseudo_labels: vec![],
        }
    }

    #[test]
    fn subset_membership() {
        let m = Manifest::new(
            "t",
            vec![
                record("both", true, true, Split::Train),
                record("isl", false, true, Split::Train),
                record("wmh", true, false, Split::Train),
                record("val", true, true, Split::Validation),
            ],
        )
        .unwrap();
        let s = m.derive_subsets();
        assert_eq!(s.fls, vec!["both"]);
        assert_eq!(s.pls_wmh, vec!["both", "wmh"]);
        assert_eq!(s.pls_isl, vec!["both", "isl"]);
        assert_eq!(s.pls_all, vec!["both", "isl", "wmh"]);
    }

    #[test]
    fn table_one_totals() {
        // 475 fully labelled, 127 WMH-only, 348 ISL-only training subjects.
        let mut samples = Vec::new();
        for i in 0..475 {
            samples.push(record(&format!("f{i}"), true, true, Split::Train));
        }
        for i in 0..127 {
            samples.push(record(&format!("w{i}"), true, false, Split::Train));
        }
        for i in 0..348 {
            samples.push(record(&format!("s{i}"), false, true, Split::Train));
        }
        let s = Manifest::new("table1", samples).unwrap().derive_subsets();
        assert_eq!(
            (s.fls.len(), s.pls_wmh.len(), s.pls_isl.len()),
            (475, 602, 823)
        );
    }

    #[test]
    fn invalid_manifests() {
        let dup = Manifest::new(
            "d",
            vec![
                record("a", true, true, Split::Train),
                record("a", true, true, Split::Test),
            ],
        );
        assert!(dup.is_err());
        let unlabelled = Manifest::new("u", vec![record("a", false, false, Split::Train)]);
        assert!(unlabelled.is_err());
        // Unlabelled test subjects are fine.
        assert!(Manifest::new("ok", vec![record("a", false, false, Split::Test)]).is_ok());
    }

    #[test]
    fn json_schema_omits_absent_labels() {
        let m = Manifest::new("j", vec![record("a", true, false, Split::Train)]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"wmh_label\""));
        assert!(!text.contains("isl_label"));
        assert!(text.contains("\"split\":\"train\""));
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.samples, m.samples);
    }

    #[test]
    fn icv_volumes() {
        let g = Geometry::isotropic([4, 4, 4]).unwrap();
        let mut ten = Mask::filled(g, false);
        for v in ten.data_mut().iter_mut().take(10) {
            *v = true;
        }
        let icv = icv_voxels(&ten).unwrap();
        assert_eq!(icv.voxels, 10);
        assert!((icv.ml - 0.01).abs() < 1e-15);

        let full = icv_voxels(&Mask::filled(g, true)).unwrap();
        assert_eq!(full.voxels, 64);
        assert!((full.ml - 0.064).abs() < 1e-15);

        let g2 = Geometry::new([1, 1, 1], [2.0; 3]).unwrap();
        let one = icv_voxels(&Mask::filled(g2, true)).unwrap();
        assert!((one.ml - 0.008).abs() < 1e-15);

        assert!(icv_voxels(&Mask::filled(g, false)).is_err());
    }
}
