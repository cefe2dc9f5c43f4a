//! Subjects loaded from a manifest, normalised and ready for training.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labelspace::LabelAvailability;
use crate::model::{TrainSample, ValSample};
use crate::sampling::normalize_intensity;
use crate::volume::{read_mask, read_volume, LabelVolume, Manifest, Mask, SampleRecord, Split, Volume3D};

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub cohort: Option<String>,
    pub split: Split,
    /// Intensity-normalised image.
    pub image: Volume3D,
    /// Annotated labels; unannotated classes read as BG.
    pub labels: LabelVolume,
    pub avail: LabelAvailability,
    pub brain: Mask,
}

/// Training-subset selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Fls,
    PlsWmh,
    PlsIsl,
    PlsAll,
    /// `PLS_all` after pseudolabel completion: every member must be fully labelled.
    PlsPseudo,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub subjects: Vec<Subject>,
}

fn load_subject(m: &Manifest, r: &SampleRecord) -> Result<Subject> {
    let raw = read_volume(m.resolve(&r.image))?;
    let brain = read_mask(m.resolve(&r.brain_mask))?;
    let image = normalize_intensity(&raw, &brain)?;
    let wmh = r.wmh_label.as_ref().map(|p| read_mask(m.resolve(p))).transpose()?;
    let isl = r.isl_label.as_ref().map(|p| read_mask(m.resolve(p))).transpose()?;
    let labels = LabelVolume::from_masks(wmh.as_ref(), isl.as_ref(), *raw.geom())?;
    let avail = LabelAvailability {
        has_wmh: wmh.is_some(),
        has_isl: isl.is_some(),
    };
    if r.split != Split::Train && !avail.is_full() {
        return Err(Error::Data(format!("{}: evaluation subjects need both labels", r.id)));
    }
    Ok(Subject {
        id: r.id.clone(),
        cohort: r.cohort.clone(),
        split: r.split,
        image,
        labels,
        avail,
        brain,
    })
}

impl Dataset {
    pub fn load(manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let subjects = manifest
            .samples
            .par_iter()
            .map(|r| load_subject(&manifest, r))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, subjects })
    }

    pub fn get(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn subset(&self, subset: Subset) -> Result<Vec<&Subject>> {
        let out: Vec<&Subject> = self
            .split(Split::Train)
            .filter(|s| match subset {
                Subset::Fls => s.avail.is_full(),
                Subset::PlsWmh => s.avail.has_wmh,
                Subset::PlsIsl => s.avail.has_isl,
                Subset::PlsAll | Subset::PlsPseudo => s.avail.has_wmh || s.avail.has_isl,
            })
            .collect();
        if subset == Subset::PlsPseudo {
            if let Some(s) = out.iter().find(|s| !s.avail.is_full()) {
                return Err(Error::Data(format!(
                    "{}: pseudolabel training needs completed labels; run the pseudolabel step first",
                    s.id
                )));
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!("training subset {subset:?} is empty")));
        }
        Ok(out)
    }

    pub fn train_samples(&self, subset: Subset) -> Result<Vec<TrainSample>> {
        self.subset(subset)?
            .into_iter()
            .map(|s| TrainSample::new(s.id.clone(), s.image.clone(), s.labels.clone(), s.avail))
            .collect()
    }

    pub fn validation(&self) -> Vec<ValSample> {
        self.split(Split::Validation)
            .map(|s| ValSample {
                id: s.id.clone(),
                image: s.image.clone(),
                labels: s.labels.clone(),
            })
            .collect()
    }
}
