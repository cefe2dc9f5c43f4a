//! Evaluation metrics: voxel overlap, distance-tolerant overlap, precision-recall,
//! volume difference, surface distance, lesion detection, subject-level false
//! positives and volume agreement, aggregated into per-method summary rows.
//!
//! Undefined values (e.g. DSC against an empty ground truth) are `None` and are
//! excluded from every mean.

mod components;
mod distance;
mod overlap;
mod report;

use std::collections::BTreeMap;

pub use components::{connected_components, ComponentLabeling};
pub use distance::{distance_transform, squared_distance_transform};
pub use overlap::{
    asd, average_precision, avd, ddsc, dsc, lesion_prec_rec, surface, DdscConfig, LesionScores,
};
pub use report::{
    read_rows_csv, write_aggregate_csv, write_bland_altman_csv, write_cohort_csv, write_rows_csv,
    write_table_csv, Provenance, AGGREGATE_COLUMNS, AGGREGATE_SCHEMA, ROWS_SCHEMA,
};

use crate::error::{Error, Result};
use crate::labelspace::{Class, Label};
use crate::volume::{icv_voxels, LabelVolume, Mask, ProbVolume};

/// Metrics of one class in one subject.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub ap: Option<f64>,
    pub dsc: Option<f64>,
    pub ddsc: Option<f64>,
    /// % of ICV; always defined.
    pub avd: Option<f64>,
    pub asd: Option<f64>,
    pub lpre: Option<f64>,
    pub lrec: Option<f64>,
    pub vol_pred_ml: f64,
    pub vol_gt_ml: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub subject: String,
    pub cohort: Option<String>,
    pub wmh: ClassMetrics,
    pub isl: ClassMetrics,
    /// For subjects without ISL: whether any ISL was predicted.
    pub isl_fp: Option<bool>,
}

impl MetricRow {
    pub fn class(&self, l: Label) -> &ClassMetrics {
        match l {
            Label::Isl => &self.isl,
            _ => &self.wmh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalConfig {
    pub ddsc: DdscConfig,
}

pub fn class_metrics(
    probs: &[f64],
    pred: &Mask,
    gt: &Mask,
    icv_ml: f64,
    cfg: &EvalConfig,
) -> Result<ClassMetrics> {
    let v = gt.geom().voxel_volume_mm3() / 1000.0;
    let lesions = lesion_prec_rec(pred, gt)?;
    Ok(ClassMetrics {
        ap: average_precision(probs, gt)?,
        dsc: dsc(pred, gt)?,
        ddsc: ddsc(pred, gt, cfg.ddsc)?,
        avd: Some(avd(pred, gt, icv_ml)?),
        asd: asd(pred, gt)?,
        lpre: lesions.precision,
        lrec: lesions.recall,
        vol_pred_ml: pred.count() as f64 * v,
        vol_gt_ml: gt.count() as f64 * v,
    })
}

/// Scores a three-class probability volume against ground truth. Decisions
/// are taken at the argmax.
pub fn evaluate_subject(
    subject: &str,
    cohort: Option<&str>,
    probs: &ProbVolume,
    gt: &LabelVolume,
    brain: &Mask,
    cfg: &EvalConfig,
) -> Result<MetricRow> {
    probs.geom().check_same(gt.geom())?;
    gt.geom().check_same(brain.geom())?;
    let icv = icv_voxels(brain)?;
    let decision = probs.argmax_labels()?;
    let mut per = Vec::new();
    for (label, class) in [(Label::Wmh, Class::Wmh), (Label::Isl, Class::Isl)] {
        let p = probs
            .channel(class)
            .ok_or_else(|| Error::Data(format!("prediction has no {class} channel")))?;
        let pred = decision.mask_of(label);
        let g = gt.mask_of(label);
        per.push(class_metrics(&p, &pred, &g, icv.ml, cfg)?);
    }
    let isl_gt_empty = !gt.data().contains(&Label::Isl);
    Ok(MetricRow {
        subject: subject.to_string(),
        cohort: cohort.map(str::to_string),
        wmh: per[0],
        isl: per[1],
        isl_fp: isl_gt_empty.then(|| decision.data().contains(&Label::Isl)),
    })
}

/// Percentage of ground-truth-negative subjects with a non-empty prediction.
pub fn subject_fp_rate(rows: &[MetricRow]) -> Option<f64> {
    let flags: Vec<bool> = rows.iter().filter_map(|r| r.isl_fp).collect();
    if flags.is_empty() {
        return None;
    }
    Some(flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltman {
    pub n: usize,
    pub mean_diff: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Bias and 95% limits of agreement of `pred − gt` (sample standard deviation).
pub fn bland_altman(pred: &[f64], gt: &[f64]) -> Result<BlandAltman> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            expected: vec![gt.len()],
            found: vec![pred.len()],
        });
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Data("Bland-Altman analysis needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    Ok(BlandAltman {
        n,
        mean_diff: mean,
        sd,
        loa_low: mean - 1.96 * sd,
        loa_high: mean + 1.96 * sd,
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-class means of one metric family and the mean of the two class means.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FamilyMeans {
    pub wmh: Option<f64>,
    pub isl: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregate {
    pub n_subjects: usize,
    pub ap: FamilyMeans,
    pub dsc: FamilyMeans,
    pub ddsc: FamilyMeans,
    pub avd: FamilyMeans,
    pub asd: FamilyMeans,
    pub lpre: FamilyMeans,
    pub lrec: FamilyMeans,
    pub fp_isl: Option<f64>,
}

pub fn aggregate(rows: &[MetricRow]) -> Aggregate {
    let fam = |f: fn(&ClassMetrics) -> Option<f64>| {
        let wmh = mean_defined(rows.iter().map(|r| f(&r.wmh)));
        let isl = mean_defined(rows.iter().map(|r| f(&r.isl)));
        let mean = match (wmh, isl) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        };
        FamilyMeans { wmh, isl, mean }
    };
    Aggregate {
        n_subjects: rows.len(),
        ap: fam(|m| m.ap),
        dsc: fam(|m| m.dsc),
        ddsc: fam(|m| m.ddsc),
        avd: fam(|m| m.avd),
        asd: fam(|m| m.asd),
        lpre: fam(|m| m.lpre),
        lrec: fam(|m| m.lrec),
        fp_isl: subject_fp_rate(rows),
    }
}

/// Aggregates per cohort (rows without a cohort are grouped under `""`).
pub fn aggregate_by_cohort(rows: &[MetricRow]) -> BTreeMap<String, Aggregate> {
    let mut groups: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry(r.cohort.clone().unwrap_or_default())
            .or_default()
            .push(r.clone());
    }
    groups.into_iter().map(|(k, v)| (k, aggregate(&v))).collect()
}

/// AP with all subjects' voxels pooled into one ranking.
pub fn pooled_average_precision(subjects: &[(&[f64], &Mask)]) -> Result<Option<f64>> {
    let mut probs = Vec::new();
    let mut gt = Vec::new();
    for (p, m) in subjects {
        if p.len() != m.len() {
            return Err(Error::Shape {
                expected: vec![m.len()],
                found: vec![p.len()],
            });
        }
        probs.extend_from_slice(p);
        gt.extend_from_slice(m.data());
    }
    if probs.is_empty() {
        return Ok(None);
    }
    let geom = crate::volume::Geometry::isotropic([probs.len(), 1, 1])?;
    average_precision(&probs, &Mask::new(geom, gt)?)
}
