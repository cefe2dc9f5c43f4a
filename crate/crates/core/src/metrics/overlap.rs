//! Voxel-, surface- and lesion-level comparisons of a predicted mask with ground truth.

use super::components::connected_components;
use super::distance::distance_transform;
use crate::error::{Error, Result};
use crate::volume::{Grid, Mask};

fn check(p: &Mask, g: &Mask) -> Result<()> {
    p.geom().check_same(g.geom())
}

fn intersection(p: &Mask, g: &Mask) -> usize {
    p.data().iter().zip(g.data()).filter(|(&a, &b)| a && b).count()
}

/// `2|P∩G| / (|P|+|G|)`; `None` when G is empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check(pred, gt)?;
    let g = gt.count();
    if g == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * intersection(pred, gt) as f64 / (pred.count() + g) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdscConfig {
    /// Match tolerance in mm.
    pub theta: f64,
}

impl Default for DdscConfig {
    fn default() -> Self {
        Self { theta: 2.0 }
    }
}

/// Distance-tolerant Dice: predicted voxels within θ of G plus ground-truth
/// voxels within θ of P, over `|P|+|G|`. Equals DSC at θ = 0.
pub fn ddsc(pred: &Mask, gt: &Mask, cfg: DdscConfig) -> Result<Option<f64>> {
    check(pred, gt)?;
    if cfg.theta < 0.0 {
        return Err(Error::Config("DDSC theta must be non-negative".into()));
    }
    let (np, ng) = (pred.count(), gt.count());
    if ng == 0 {
        return Ok(None);
    }
    if np == 0 {
        return Ok(Some(0.0));
    }
    let dg = distance_transform(gt)?;
    let dp = distance_transform(pred)?;
    let within = |m: &Mask, d: &Grid<f64>| {
        m.data()
            .iter()
            .zip(d.data())
            .filter(|(&b, &dist)| b && dist <= cfg.theta)
            .count()
    };
    Ok(Some(
        (within(pred, &dg) + within(gt, &dp)) as f64 / (np + ng) as f64,
    ))
}

/// Area under the voxel precision-recall curve, thresholds at every distinct
/// probability (ties form one operating point). `None` when G is empty.
pub fn average_precision(probs: &[f64], gt: &Mask) -> Result<Option<f64>> {
    if probs.len() != gt.len() {
        return Err(Error::Shape {
            expected: vec![gt.len()],
            found: vec![probs.len()],
        });
    }
    let pos = gt.count();
    if pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = probs[order[i]];
        while i < order.len() && probs[order[i]] == t {
            if gt.data()[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(Some(ap))
}

/// Absolute volume difference as a percentage of intracranial volume.
pub fn avd(pred: &Mask, gt: &Mask, icv_ml: f64) -> Result<f64> {
    check(pred, gt)?;
    if !(icv_ml > 0.0) {
        return Err(Error::Data("ICV must be positive".into()));
    }
    let v = pred.geom().voxel_volume_mm3() / 1000.0;
    let diff = (pred.count() as f64 - gt.count() as f64).abs() * v;
    Ok(diff / icv_ml * 100.0)
}

/// Mask voxels with at least one 6-neighbour outside the mask (or outside the grid).
pub fn surface(mask: &Mask) -> Mask {
    let geom = *mask.geom();
    Grid::from_fn(geom, |p| {
        if !mask.get(p[0], p[1], p[2]) {
            return false;
        }
        for a in 0..3 {
            for d in [-1isize, 1] {
                let mut q = [p[0] as isize, p[1] as isize, p[2] as isize];
                q[a] += d;
                if !geom.contains(q) || !mask.get(q[0] as usize, q[1] as usize, q[2] as usize) {
                    return true;
                }
            }
        }
        false
    })
}

/// Average symmetric surface distance (mm); `None` if either mask is empty.
pub fn asd(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check(pred, gt)?;
    if !pred.any() || !gt.any() {
        return Ok(None);
    }
    let sp = surface(pred);
    let sg = surface(gt);
    let dp = distance_transform(&sp)?;
    let dg = distance_transform(&sg)?;
    let sum = |s: &Mask, d: &Grid<f64>| -> f64 {
        s.data()
            .iter()
            .zip(d.data())
            .filter(|(&b, _)| b)
            .map(|(_, &x)| x)
            .sum()
    };
    let total = sum(&sp, &dg) + sum(&sg, &dp);
    Ok(Some(total / (sp.count() + sg.count()) as f64))
}

/// Lesion-level precision and recall over 26-connected components, with a
/// one-voxel overlap detection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionScores {
    /// `None` when there are no predicted components (or no ground truth).
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn lesion_prec_rec(pred: &Mask, gt: &Mask) -> Result<LesionScores> {
    check(pred, gt)?;
    if !gt.any() {
        return Ok(LesionScores {
            precision: None,
            recall: None,
        });
    }
    let hits = |from: &Mask, other: &Mask| -> (usize, usize) {
        let c = connected_components(from);
        let hit = c
            .voxels
            .iter()
            .filter(|vs| vs.iter().any(|&i| other.data()[i]))
            .count();
        (hit, c.count)
    };
    let (tp, n_pred) = hits(pred, gt);
    let (det, n_gt) = hits(gt, pred);
    Ok(LesionScores {
        precision: (n_pred > 0).then(|| tp as f64 / n_pred as f64),
        recall: Some(det as f64 / n_gt as f64),
    })
}
