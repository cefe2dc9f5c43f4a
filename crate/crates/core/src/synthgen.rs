//! Deterministic synthetic two-pathology datasets.
//!
//! Each subject is an ellipsoidal "brain" with dark ventricles, a smooth tissue
//! texture and additive noise. WMH-like lesions are many small bright blobs in
//! a band around the ventricles; ISL-like lesions are fewer, larger blobs away
//! from it. Intensity distributions of the two classes overlap.
//!
//! Subjects come from three acquisition sites with different lesion
//! appearance. Fully labelled training subjects come from the first site,
//! WMH-only subjects from the second and ISL-only subjects from the third, so
//! partially labelled data carries appearance the fully labelled subset lacks.
//! Validation and test subjects are drawn from all sites.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::Label;
use crate::metrics::distance_transform;
use crate::rng;
use crate::sampling::gaussian_blur;
use crate::volume::{
    write_volume, Geometry, Grid, LabelVolume, Manifest, Mask, RegionMap, SampleRecord, Split,
    Volume3D,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn draw(&self, r: &mut impl Rng) -> f64 {
        if self.max > self.min {
            r.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn draw_count(&self, r: &mut impl Rng) -> usize {
        let lo = self.min.round() as usize;
        let hi = self.max.round() as usize;
        if hi > lo {
            r.random_range(lo..=hi)
        } else {
            lo
        }
    }
}

/// Blob statistics of one lesion class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobClass {
    pub count: Range,
    /// Semi-axis length in voxels.
    pub radius: Range,
    /// Intensity added on top of tissue: mean and standard deviation per blob.
    pub amplitude_mean: f64,
    pub amplitude_sd: f64,
    /// Relative radius of a cavitation core (0 for solid blobs).
    pub core_fraction: f64,
    /// Intensity added inside the core instead of the blob amplitude.
    pub core_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub name: String,
    pub wmh: BlobClass,
    pub isl: BlobClass,
}

/// Missing fields in a JSON configuration take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub fully_labelled_fraction: f64,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Sites supplying fully labelled, WMH-only and ISL-only training subjects.
    pub sites: [SiteProfile; 3],
    /// Fraction of test subjects generated without ISL.
    pub empty_isl_test_fraction: f64,
    pub noise_sd: f64,
    pub texture_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let wmh = BlobClass {
            count: Range::new(5.0, 10.0),
            radius: Range::new(0.8, 1.6),
            amplitude_mean: 0.9,
            amplitude_sd: 0.15,
            core_fraction: 0.0,
            core_amplitude: 0.0,
        };
        let isl = BlobClass {
            count: Range::new(1.0, 2.0),
            radius: Range::new(2.2, 3.4),
            amplitude_mean: 1.3,
            amplitude_sd: 0.15,
            core_fraction: 0.0,
            core_amplitude: 0.0,
        };
        Self {
            n_train: 120,
            n_val: 12,
            n_test: 40,
            fully_labelled_fraction: 0.25,
            shape: [32; 3],
            spacing: [1.0; 3],
            sites: [
                SiteProfile {
                    name: "siteA".into(),
                    wmh,
                    isl,
                },
                SiteProfile {
                    name: "siteB".into(),
                    wmh: BlobClass {
                        count: Range::new(8.0, 14.0),
                        radius: Range::new(1.0, 2.0),
                        amplitude_mean: 0.7,
                        ..wmh
                    },
                    isl: BlobClass {
                        count: Range::new(0.0, 1.0),
                        ..isl
                    },
                },
                SiteProfile {
                    name: "siteC".into(),
                    wmh: BlobClass {
                        count: Range::new(3.0, 7.0),
                        ..wmh
                    },
                    isl: BlobClass {
                        count: Range::new(1.0, 3.0),
                        radius: Range::new(2.8, 4.2),
                        amplitude_mean: 0.9,
                        core_fraction: 0.7,
                        core_amplitude: -0.6,
                        ..isl
                    },
                },
            ],
            empty_isl_test_fraction: 0.25,
            noise_sd: 0.12,
            texture_sd: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, f) in [
            ("fully_labelled_fraction", self.fully_labelled_fraction),
            ("empty_isl_test_fraction", self.empty_isl_test_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{n} must lie in [0, 1]")));
            }
        }
        Geometry::new(self.shape, self.spacing)?;
        if self.shape.iter().any(|&s| s < 12) {
            return Err(Error::Config("synthetic volumes must be at least 12 voxels per axis".into()));
        }
        for s in &self.sites {
            for b in [&s.wmh, &s.isl] {
                if b.count.min < 0.0 || b.count.min > b.count.max || b.radius.min <= 0.0 || b.radius.min > b.radius.max || b.amplitude_sd < 0.0
                    || !(0.0..1.0).contains(&b.core_fraction)
                    || (b.core_fraction > 0.0 && b.core_amplitude == 0.0)
                {
                    return Err(Error::Config(format!("site {}: bad blob ranges", s.name)));
                }
            }
        }
        if self.noise_sd < 0.0 || self.texture_sd < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Counts of fully labelled, WMH-only and ISL-only training subjects.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let fls = ((self.fully_labelled_fraction * self.n_train as f64).round() as usize).min(self.n_train);
        let rest = self.n_train - fls;
        (fls, rest - rest / 2, rest / 2)
    }
}

/// One synthesised lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub label: Label,
    pub centre: [f64; 3],
    pub radii: [f64; 3],
    pub amplitude: f64,
    pub core_fraction: f64,
    pub core_amplitude: f64,
}

/// Everything generated for one subject, before anything is written.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub id: String,
    pub site: String,
    pub image: Volume3D,
    pub labels: LabelVolume,
    pub brain: Mask,
    pub regions: RegionMap,
    pub blobs: Vec<Blob>,
}

const REGION_WM: [u32; 2] = [2, 41];
const REGION_CORTEX: [u32; 2] = [3, 42];
const REGION_VENTRICLE: [u32; 2] = [4, 43];

fn ellipsoid(p: [usize; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] as f64 - c[a]) / r[a]).powi(2)).sum()
}

/// Generates one subject. `with_isl = false` suppresses ISL blobs.
pub fn generate_subject(
    cfg: &SynthConfig,
    site: &SiteProfile,
    id: &str,
    stream: u64,
    with_isl: bool,
) -> Result<SynthSubject> {
    let geom = Geometry::new(cfg.shape, cfg.spacing)?;
    let mut r = rng::stream(cfg.seed, &[rng::tag("subject"), stream]);
    let s: [f64; 3] = std::array::from_fn(|a| cfg.shape[a] as f64);
    let centre: [f64; 3] = std::array::from_fn(|a| (s[a] - 1.0) / 2.0 + r.random_range(-0.5..0.5));
    let brain_r: [f64; 3] = std::array::from_fn(|a| s[a] * r.random_range(0.40..0.45));
    let brain = Mask::from_fn(geom, |p| ellipsoid(p, centre, brain_r) <= 1.0);
    let cortex = Mask::from_fn(geom, |p| {
        let inner: [f64; 3] = std::array::from_fn(|a| brain_r[a] - 2.0);
        ellipsoid(p, centre, brain_r) <= 1.0 && ellipsoid(p, centre, inner) > 1.0
    });
    let vent_half = s[0] * 0.09;
    let vent_r = [s[0] * 0.05, s[1] * 0.14, s[2] * 0.08];
    let vents = [
        [centre[0] - vent_half, centre[1], centre[2]],
        [centre[0] + vent_half, centre[1], centre[2]],
    ];
    let ventricles = Mask::from_fn(geom, |p| vents.iter().any(|&c| ellipsoid(p, c, vent_r) <= 1.0));
    let vent_dist = distance_transform(&ventricles)?;
    let border_dist = distance_transform(&brain.map(|b| !b))?;

    let regions = RegionMap::from_fn(geom, |p| {
        if !brain.get(p[0], p[1], p[2]) {
            return 0;
        }
        let side = usize::from(p[0] as f64 > centre[0]);
        if ventricles.get(p[0], p[1], p[2]) {
            REGION_VENTRICLE[side]
        } else if cortex.get(p[0], p[1], p[2]) {
            REGION_CORTEX[side]
        } else {
            REGION_WM[side]
        }
    });

    let mut labels = LabelVolume::filled(geom, Label::Bg);
    let mut blobs = Vec::new();
    let mut place = |class: &BlobClass,
                     label: Label,
                     labels: &mut LabelVolume,
                     allowed: &dyn Fn(usize) -> bool,
                     r: &mut ChaCha8Rng|
     -> Result<()> {
        let n = class.count.draw_count(r);
        let candidates: Vec<usize> = (0..geom.len()).filter(|&i| allowed(i)).collect();
        for _ in 0..n {
            let mut placed = false;
            for _attempt in 0..100 {
                if candidates.is_empty() {
                    break;
                }
                let c = geom.coords(candidates[r.random_range(0..candidates.len())]);
                let c: [f64; 3] = std::array::from_fn(|a| c[a] as f64 + r.random_range(-0.5..0.5));
                let radii: [f64; 3] = std::array::from_fn(|_| class.radius.draw(r));
                let voxels: Vec<usize> = (0..geom.len())
                    .filter(|&i| ellipsoid(geom.coords(i), c, radii) <= 1.0)
                    .collect();
                let clash = voxels.iter().any(|&i| {
                    !brain.data()[i] || ventricles.data()[i] || labels.data()[i] != Label::Bg
                });
                if voxels.is_empty() || clash {
                    continue;
                }
                voxels.iter().for_each(|&i| labels.data_mut()[i] = label);
                let amp = Normal::new(class.amplitude_mean, class.amplitude_sd)
                    .expect("valid sd")
                    .sample(r)
                    .max(0.05);
                blobs.push(Blob {
                    label,
                    centre: c,
                    radii,
                    amplitude: amp,
                    core_fraction: class.core_fraction,
                    core_amplitude: class.core_amplitude,
                });
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Data(format!(
                    "{id}: could not place a {label:?} blob after 100 attempts"
                )));
            }
        }
        Ok(())
    };
    if with_isl {
        let off_band = |i: usize| vent_dist.data()[i] >= 6.0 && border_dist.data()[i] >= 3.0;
        place(&site.isl, Label::Isl, &mut labels, &off_band, &mut r)?;
    }
    let band = |i: usize| {
        let d = vent_dist.data()[i];
        (1.0..=4.0).contains(&d) && border_dist.data()[i] >= 2.0
    };
    place(&site.wmh, Label::Wmh, &mut labels, &band, &mut r)?;

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let raw = Volume3D::from_fn(geom, |_| noise.sample(&mut r) as f32);
    let texture = gaussian_blur(&raw, 1.5);
    let tex_sd = {
        let d = texture.data();
        let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt().max(1e-12)
    };
    let mut image = Volume3D::filled(geom, 0.0);
    for i in 0..geom.len() {
        let mut v = 0.0;
        if brain.data()[i] {
            v = 1.0 + cfg.texture_sd * texture.data()[i] as f64 / tex_sd;
            if ventricles.data()[i] {
                v -= 0.7;
            } else if cortex.data()[i] {
                v += 0.1;
            }
        }
        v += cfg.noise_sd * noise.sample(&mut r);
        image.data_mut()[i] = v as f32;
    }
    for b in &blobs {
        for i in 0..geom.len() {
            let e = ellipsoid(geom.coords(i), b.centre, b.radii);
            if labels.data()[i] == b.label && e <= 1.0 {
                let core = e <= b.core_fraction * b.core_fraction;
                image.data_mut()[i] += if core { b.core_amplitude } else { b.amplitude } as f32;
            }
        }
    }
    Ok(SynthSubject {
        id: id.to_string(),
        site: site.name.clone(),
        image,
        labels,
        brain,
        regions,
        blobs,
    })
}

/// Which labels a training subject is released with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Release {
    Both,
    WmhOnly,
    IslOnly,
}

struct Plan {
    id: String,
    split: Split,
    site: usize,
    release: Release,
    with_isl: bool,
}

fn plan(cfg: &SynthConfig) -> Vec<Plan> {
    let (fls, wmh_only, _) = cfg.split_counts();
    let mut out = Vec::new();
    for i in 0..cfg.n_train {
        let (site, release) = if i < fls {
            (0, Release::Both)
        } else if i < fls + wmh_only {
            (1, Release::WmhOnly)
        } else {
            (2, Release::IslOnly)
        };
        out.push(Plan {
            id: format!("train_{i:03}"),
            split: Split::Train,
            site,
            release,
            with_isl: true,
        });
    }
    for i in 0..cfg.n_val {
        out.push(Plan {
            id: format!("val_{i:03}"),
            split: Split::Validation,
            site: i % 3,
            release: Release::Both,
            with_isl: true,
        });
    }
    let n_empty = (cfg.empty_isl_test_fraction * cfg.n_test as f64).round() as usize;
    for i in 0..cfg.n_test {
        out.push(Plan {
            id: format!("test_{i:03}"),
            split: Split::Test,
            site: i % 3,
            release: Release::Both,
            // Spread the ISL-free subjects over the test set.
            with_isl: n_empty == 0 || (i * n_empty) / cfg.n_test == ((i + 1) * n_empty) / cfg.n_test,
        });
    }
    out
}

/// Generates all subjects in memory, in manifest order.
pub fn generate_subjects(cfg: &SynthConfig) -> Result<Vec<(SynthSubject, Split, bool, bool)>> {
    cfg.validate()?;
    plan(cfg)
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let s = generate_subject(cfg, &cfg.sites[p.site], &p.id, k as u64, p.with_isl)?;
            let (w, i) = match p.release {
                Release::Both => (true, true),
                Release::WmhOnly => (true, false),
                Release::IslOnly => (false, true),
            };
            Ok((s, p.split, w, i))
        })
        .collect()
}

/// Writes the dataset (NIfTI volumes plus `manifest.json`) under `out`.
pub fn generate(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    for sub in ["images", "labels", "masks", "regions"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let subjects = generate_subjects(cfg)?;
    let records: Vec<SampleRecord> = subjects
        .par_iter()
        .map(|(s, split, has_wmh, has_isl)| -> Result<SampleRecord> {
            let rel = |dir: &str, suffix: &str| PathBuf::from(dir).join(format!("{}{suffix}.nii.gz", s.id));
            let image = rel("images", "");
            write_volume(&s.image, &out.join(&image))?;
            let brain_mask = rel("masks", "_brain");
            write_volume(&s.brain, &out.join(&brain_mask))?;
            let region_map = rel("regions", "_regions");
            write_volume(&s.regions, &out.join(&region_map))?;
            let write_label = |l: Label, suffix: &str| -> Result<PathBuf> {
                let p = rel("labels", suffix);
                write_volume(&s.labels.mask_of(l), &out.join(&p))?;
                Ok(p)
            };
            let wmh_label = if *has_wmh { Some(write_label(Label::Wmh, "_wmh")?) } else { None };
            let isl_label = if *has_isl { Some(write_label(Label::Isl, "_isl")?) } else { None };
            Ok(SampleRecord {
                id: s.id.clone(),
                image,
                wmh_label,
                isl_label,
                brain_mask,
                split: *split,
                cohort: Some(s.site.clone()),
                region_map: Some(region_map),
                pseudo_labels: vec![],
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(format!("synthetic-seed{}", cfg.seed), records)?.with_base_dir(out);
    manifest.save(out.join("manifest.json"))?;
    let cfg_path = out.join("synth_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

/// Voxels that carry a lesion label, as a grid, for consistency checks.
pub fn lesion_mask(s: &SynthSubject) -> Mask {
    Grid::from_fn(*s.labels.geom(), |p| s.labels.get(p[0], p[1], p[2]) != Label::Bg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 6,
            n_val: 2,
            n_test: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(SynthConfig::default().split_counts(), (30, 45, 45));
        let all = SynthConfig {
            fully_labelled_fraction: 1.0,
            ..SynthConfig::default()
        };
        assert_eq!(all.split_counts(), (120, 0, 0));
        let odd = SynthConfig {
            n_train: 7,
            fully_labelled_fraction: 0.0,
            ..SynthConfig::default()
        };
        assert_eq!(odd.split_counts(), (0, 4, 3));
    }

    #[test]
    fn labels_match_modified_voxels() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            texture_sd: 0.0,
            ..small()
        };
        for (k, site) in cfg.sites.iter().enumerate() {
            let s = generate_subject(&cfg, site, "x", k as u64, true).unwrap();
            let lesion = lesion_mask(&s);
            for i in 0..s.image.len() {
                let base = if !s.brain.data()[i] {
                    0.0
                } else if s.regions.data()[i] == 4 || s.regions.data()[i] == 43 {
                    0.3
                } else if s.regions.data()[i] == 3 || s.regions.data()[i] == 42 {
                    1.1
                } else {
                    1.0
                };
                let modified = (s.image.data()[i] as f64 - base).abs() > 1e-4;
                assert_eq!(modified, lesion.data()[i], "site {k} voxel {i}");
            }
            assert!(s.labels.data().contains(&Label::Wmh));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small();
        let a = generate_subjects(&cfg).unwrap();
        let b = generate_subjects(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0.image, y.0.image);
            assert_eq!(x.0.labels, y.0.labels);
        }
        let other = generate_subjects(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].0.image, other[0].0.image);
    }
}
