//! Completing partially labelled training subjects with a teacher ensemble.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::data::Dataset;
use super::predict::ensemble_probs;
use crate::error::{Error, Result};
use crate::labelspace::{compose_pseudolabel, Class, Label};
use crate::model::Checkpoint;
use crate::volume::{write_volume, Manifest, SampleRecord, Split};

/// Writes completed labels for every training subject lacking one and
/// returns a manifest in which all of `PLS_all` is fully labelled.
///
/// The teacher must predict `[BG, WMH, ISL]` on its first head. Paths of
/// untouched files are made absolute so the manifest can live anywhere.
pub fn generate_pseudolabels(teacher: &[Checkpoint], data: &Dataset, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    if teacher.is_empty() {
        return Err(Error::Config("pseudolabels need a trained marginal teacher; run the marginal strategy first".into()));
    }
    if teacher.iter().any(|c| c.model.head_classes()[0] != [Class::Bg, Class::Wmh, Class::Isl]) {
        return Err(Error::Config("teacher must predict [BG, WMH, ISL]".into()));
    }
    let dir = out.join("pseudolabels");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let m = &data.manifest;
    let abs = |p: &PathBuf| m.resolve(p);
    let records: Vec<SampleRecord> = m
        .samples
        .par_iter()
        .map(|r| -> Result<SampleRecord> {
            let mut rec = r.clone();
            rec.image = abs(&r.image);
            rec.brain_mask = abs(&r.brain_mask);
            rec.wmh_label = r.wmh_label.as_ref().map(abs);
            rec.isl_label = r.isl_label.as_ref().map(abs);
            rec.region_map = r.region_map.as_ref().map(abs);
            let missing = r.split == Split::Train && (r.has_wmh() != r.has_isl());
            if !missing {
                return Ok(rec);
            }
            let s = data
                .get(&r.id)
                .ok_or_else(|| Error::Data(format!("{}: not loaded", r.id)))?;
            let votes = ensemble_probs(teacher, &s.image, 0)?.argmax_labels()?;
            let composed = compose_pseudolabel(&s.labels, s.avail, &votes)?;
            let (label, name) = if r.has_wmh() { (Label::Isl, "isl") } else { (Label::Wmh, "wmh") };
            let file = dir.join(format!("{}_{name}.nii.gz", r.id));
            write_volume(&composed.mask_of(label), &file)?;
            let rel = PathBuf::from("pseudolabels").join(file.file_name().expect("file name"));
            match label {
                Label::Isl => rec.isl_label = Some(rel),
                _ => rec.wmh_label = Some(rel),
            }
            rec.pseudo_labels.push(name.to_string());
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(format!("{}-pseudo", m.dataset_name), records)?.with_base_dir(out);
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
