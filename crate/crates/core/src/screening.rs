//! FLAIR visibility screen for ischaemic lesion annotations.
//!
//! A scan is discarded when any lesion component is not clearly brighter than
//! the normal tissue of the anatomical region hosting it: either the mean
//! intensity gap is below a threshold, or too many lesion voxels sit closer to
//! the normal-tissue mean than to the lesion mean.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::connected_components;
use crate::volume::{Mask, RegionMap, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub mean_diff_threshold: f64,
    pub fraction_threshold: f64,
}

impl ScreeningConfig {
    pub const ISLES: Self = Self {
        mean_diff_threshold: 0.05,
        fraction_threshold: 0.20,
    };
    pub const SOOP: Self = Self {
        mean_diff_threshold: 0.10,
        fraction_threshold: 0.10,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "isles" => Ok(Self::ISLES),
            "soop" => Ok(Self::SOOP),
            other => Err(Error::Config(format!(
                "unknown screening preset {other:?} (expected isles or soop)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v < 1.0;
        if !ok(self.mean_diff_threshold) || !ok(self.fraction_threshold) {
            return Err(Error::Config("screening thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Left/right region id pairs merged onto one id (the left one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideCollapse {
    map: HashMap<u32, u32>,
}

impl Default for SideCollapse {
    /// Whole-brain anatomy labels as produced by common FreeSurfer-style
    /// segmenters: cerebral white matter, cortex, lateral ventricle, inferior
    /// lateral ventricle, cerebellar white matter and cortex, thalamus, caudate,
    /// putamen, pallidum, hippocampus, amygdala, accumbens, ventral DC.
    fn default() -> Self {
        Self::from_pairs(&[
            (2, 41),
            (3, 42),
            (4, 43),
            (5, 44),
            (7, 46),
            (8, 47),
            (10, 49),
            (11, 50),
            (12, 51),
            (13, 52),
            (17, 53),
            (18, 54),
            (26, 58),
            (28, 60),
        ])
    }
}

impl SideCollapse {
    pub fn from_pairs(pairs: &[(u32, u32)]) -> Self {
        Self {
            map: pairs.iter().map(|&(l, r)| (r, l)).collect(),
        }
    }

    /// No merging.
    pub fn identity() -> Self {
        Self {
            map: HashMap::new(),
        }
    }

    pub fn apply(&self, regions: &RegionMap) -> RegionMap {
        regions.map(|r| self.map.get(&r).copied().unwrap_or(r))
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clamps to the 1st–99th percentile range (linear interpolation, all voxels)
/// and rescales that range to [0, 1].
pub fn percentile_normalise(x: &Volume3D) -> Result<Volume3D> {
    let mut v: Vec<f64> = x.data().iter().map(|&a| a as f64).collect();
    v.sort_by(f64::total_cmp);
    let lo = percentile(&v, 0.01);
    let hi = percentile(&v, 0.99);
    if !(hi > lo) {
        return Err(Error::Data(
            "image is constant between the 1st and 99th percentile".into(),
        ));
    }
    Ok(x.map(|a| ((a as f64).clamp(lo, hi) - lo) as f32 / (hi - lo) as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentDiagnostic {
    pub component: usize,
    pub voxels: usize,
    pub host_region: u32,
    pub component_mean: f64,
    pub normal_mean: f64,
    pub diff: f64,
    /// Fraction of component voxels strictly closer to the normal-tissue mean.
    pub fraction_closer_to_normal: f64,
    pub fails_diff: bool,
    pub fails_fraction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenResult {
    pub verdict: Verdict,
    pub components: Vec<ComponentDiagnostic>,
}

/// Screens one scan. `x_norm` is the percentile-normalised image and `regions`
/// the side-collapsed anatomy map.
pub fn screen_scan(
    x_norm: &Volume3D,
    isl: &Mask,
    regions: &RegionMap,
    cfg: &ScreeningConfig,
) -> Result<ScreenResult> {
    cfg.validate()?;
    x_norm.geom().check_same(isl.geom())?;
    x_norm.geom().check_same(regions.geom())?;
    let cc = connected_components(isl);
    let img = x_norm.data();
    let reg = regions.data();
    let mut components = Vec::with_capacity(cc.count);
    for (k, voxels) in cc.voxels.iter().enumerate() {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in voxels {
            *counts.entry(reg[i]).or_default() += 1;
        }
        let has_brain = counts.keys().any(|&r| r != 0);
        // Most voxels wins; ties go to the smaller id.
        let host = counts
            .iter()
            .filter(|(&r, _)| !has_brain || r != 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&r, _)| r)
            .expect("component is non-empty");
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..img.len() {
            if reg[i] == host && !isl.data()[i] {
                s += img[i] as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data(format!(
                "region {host} has no voxels outside the lesion mask"
            )));
        }
        let normal_mean = s / n as f64;
        let component_mean =
            voxels.iter().map(|&i| img[i] as f64).sum::<f64>() / voxels.len() as f64;
        let closer = voxels
            .iter()
            .filter(|&&i| {
                let v = img[i] as f64;
                (v - normal_mean).abs() < (v - component_mean).abs()
            })
            .count();
        let diff = component_mean - normal_mean;
        let fraction = closer as f64 / voxels.len() as f64;
        components.push(ComponentDiagnostic {
            component: k + 1,
            voxels: voxels.len(),
            host_region: host,
            component_mean,
            normal_mean,
            diff,
            fraction_closer_to_normal: fraction,
            fails_diff: diff < cfg.mean_diff_threshold,
            fails_fraction: fraction > cfg.fraction_threshold,
        });
    }
    let verdict = if components.iter().any(|c| c.fails_diff || c.fails_fraction) {
        Verdict::Discard
    } else {
        Verdict::Keep
    };
    Ok(ScreenResult {
        verdict,
        components,
    })
}

/// Normalises the raw image, collapses region sides, then screens.
pub fn screen_raw(
    x: &Volume3D,
    isl: &Mask,
    regions: &RegionMap,
    collapse: &SideCollapse,
    cfg: &ScreeningConfig,
) -> Result<ScreenResult> {
    if !isl.any() {
        return Ok(ScreenResult {
            verdict: Verdict::Keep,
            components: vec![],
        });
    }
    screen_scan(&percentile_normalise(x)?, isl, &collapse.apply(regions), cfg)
}

/// One row per component: subject, component diagnostics and scan verdict.
pub fn write_diagnostics_csv(
    path: impl AsRef<Path>,
    results: &[(String, ScreenResult)],
    header: &str,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "subject",
            "component",
            "voxels",
            "host_region",
            "component_mean",
            "normal_mean",
            "diff",
            "fraction_closer_to_normal",
            "fails_diff",
            "fails_fraction",
            "scan_verdict",
        ])?;
        for (id, r) in results {
            let verdict = match r.verdict {
                Verdict::Keep => "keep",
                Verdict::Discard => "discard",
            };
            for c in &r.components {
                w.write_record([
                    id.clone(),
                    c.component.to_string(),
                    c.voxels.to_string(),
                    c.host_region.to_string(),
                    format!("{:.6}", c.component_mean),
                    format!("{:.6}", c.normal_mean),
                    format!("{:.6}", c.diff),
                    format!("{:.6}", c.fraction_closer_to_normal),
                    c.fails_diff.to_string(),
                    c.fails_fraction.to_string(),
                    verdict.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
