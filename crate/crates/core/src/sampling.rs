//! Patch extraction with class-centred sampling, and the spatial and
//! intensity augmentation pipeline applied to training patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{Class, ClassSet, Label};
use crate::volume::{Geometry, Grid, LabelVolume, Mask, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub patch_size: [usize; 3],
    /// Probability that the patch is centred on a background voxel.
    pub p_background: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch_size: [32; 3],
            p_background: 0.3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_background) {
            return Err(Error::Config("p_background must lie in [0, 1]".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(())
    }
}

/// Voxel indices per label, built once per subject.
#[derive(Debug, Clone)]
pub struct LabelIndex {
    by_label: [Vec<u32>; 3],
}

impl LabelIndex {
    pub fn new(y: &LabelVolume) -> Self {
        let mut by_label: [Vec<u32>; 3] = Default::default();
        for (i, &l) in y.data().iter().enumerate() {
            by_label[l.code() as usize].push(i as u32);
        }
        Self { by_label }
    }

    pub fn count(&self, l: Label) -> usize {
        self.by_label[l.code() as usize].len()
    }

    fn voxels_of(&self, c: Class) -> impl Iterator<Item = &[u32]> {
        Label::ALL
            .into_iter()
            .filter(move |&l| c.covers(l))
            .map(|l| self.by_label[l.code() as usize].as_slice())
    }

    fn size_of(&self, c: Class) -> usize {
        self.voxels_of(c).map(<[u32]>::len).sum()
    }

    fn pick(&self, c: Class, rng: &mut impl Rng) -> u32 {
        let mut k = rng.random_range(0..self.size_of(c));
        for part in self.voxels_of(c) {
            if k < part.len() {
                return part[k];
            }
            k -= part.len();
        }
        unreachable!("index within class size")
    }
}

/// Centre voxel of the next patch.
///
/// With probability `p_background` a BG voxel; otherwise a uniformly drawn
/// non-empty foreground member of `trained`, then a uniform voxel of it.
/// Falls back to BG when no trained class is present.
pub fn sample_centre(
    index: &LabelIndex,
    geom: &Geometry,
    trained: &ClassSet,
    p_background: f64,
    rng: &mut impl Rng,
) -> [usize; 3] {
    let draw_bg = rng.random::<f64>() < p_background;
    let present: Vec<Class> = trained
        .foreground()
        .into_iter()
        .filter(|&c| index.size_of(c) > 0)
        .collect();
    let voxel = if draw_bg || present.is_empty() {
        if index.count(Label::Bg) > 0 {
            index.pick(Class::Bg, rng)
        } else {
            rng.random_range(0..geom.len() as u32)
        }
    } else {
        let c = present[rng.random_range(0..present.len())];
        index.pick(c, rng)
    };
    geom.coords(voxel as usize)
}

/// Patch of `size` centred on `centre`; outside reads are zero / BG.
pub fn extract_patch(
    x: &Volume3D,
    y: &LabelVolume,
    centre: [usize; 3],
    size: [usize; 3],
) -> Result<(Volume3D, LabelVolume)> {
    x.geom().check_same(y.geom())?;
    let pg = Geometry::new(size, x.spacing())?;
    let start: [isize; 3] = std::array::from_fn(|a| centre[a] as isize - (size[a] / 2) as isize);
    let mut img = Vec::with_capacity(pg.len());
    let mut lab = Vec::with_capacity(pg.len());
    for i in 0..pg.len() {
        let p = pg.coords(i);
        let q: [isize; 3] = std::array::from_fn(|a| start[a] + p[a] as isize);
        if x.geom().contains(q) {
            let j = x.geom().index(q[0] as usize, q[1] as usize, q[2] as usize);
            img.push(x.data()[j]);
            lab.push(y.data()[j]);
        } else {
            img.push(0.0);
            lab.push(Label::Bg);
        }
    }
    Ok((Grid::new(pg, img)?, Grid::new(pg, lab)?))
}

/// Samples a centre and extracts the patch around it.
pub fn sample_patch(
    x: &Volume3D,
    y: &LabelVolume,
    trained: &ClassSet,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(Volume3D, LabelVolume)> {
    let index = LabelIndex::new(y);
    let c = sample_centre(&index, y.geom(), trained, cfg.p_background, rng);
    extract_patch(x, y, c, cfg.patch_size)
}

/// Z-scores intensities over the brain mask and zeroes everything outside it.
pub fn normalize_intensity(x: &Volume3D, brain: &Mask) -> Result<Volume3D> {
    x.geom().check_same(brain.geom())?;
    let vals: Vec<f64> = x
        .data()
        .iter()
        .zip(brain.data())
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v as f64)
        .collect();
    if vals.is_empty() {
        return Err(Error::Data("empty brain mask".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    let data = x
        .data()
        .iter()
        .zip(brain.data())
        .map(|(&v, &b)| if b { ((v as f64 - mean) / sd) as f32 } else { 0.0 })
        .collect();
    Grid::new(*x.geom(), data)
}

/// A transform firing with probability `p`, with its parameter drawn from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Randomized {
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Randomized {
    const fn new(p: f64, lo: f64, hi: f64) -> Self {
        Self { p, lo, hi }
    }

    fn fire(&self, rng: &mut impl Rng) -> Option<f64> {
        if rng.random::<f64>() < self.p {
            Some(if self.hi > self.lo {
                rng.random_range(self.lo..=self.hi)
            } else {
                self.lo
            })
        } else {
            None
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || self.lo > self.hi {
            return Err(Error::Config(format!("augmentation {name}: bad probability or range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Per-axis flip probability.
    pub flip_p: f64,
    /// Rotation angle in degrees, drawn per axis.
    pub rotation_deg: Randomized,
    pub scale: Randomized,
    /// Range of the noise variance.
    pub noise_variance: Randomized,
    pub blur_sigma: Randomized,
    pub brightness: Randomized,
    pub contrast: Randomized,
    pub gamma: Randomized,
    /// Probability of applying gamma to the inverted image.
    pub gamma_invert_p: f64,
    pub low_res: Randomized,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            rotation_deg: Randomized::new(0.2, -90.0, 90.0),
            scale: Randomized::new(0.2, 0.7, 1.4),
            noise_variance: Randomized::new(0.15, 0.1, 0.1),
            blur_sigma: Randomized::new(0.1, 0.5, 1.5),
            brightness: Randomized::new(0.15, 0.7, 1.3),
            contrast: Randomized::new(0.15, 0.65, 1.5),
            gamma: Randomized::new(0.15, 0.7, 1.5),
            gamma_invert_p: 0.15,
            low_res: Randomized::new(0.25, 1.0, 4.0),
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        let off = |r: Randomized| Randomized { p: 0.0, ..r };
        let d = Self::default();
        Self {
            flip_p: 0.0,
            rotation_deg: off(d.rotation_deg),
            scale: off(d.scale),
            noise_variance: off(d.noise_variance),
            blur_sigma: off(d.blur_sigma),
            brightness: off(d.brightness),
            contrast: off(d.contrast),
            gamma: off(d.gamma),
            gamma_invert_p: d.gamma_invert_p,
            low_res: off(d.low_res),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [("flip", self.flip_p), ("gamma inversion", self.gamma_invert_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation {n}: bad probability")));
            }
        }
        self.rotation_deg.check("rotation")?;
        self.scale.check("scale")?;
        self.noise_variance.check("noise")?;
        self.blur_sigma.check("blur")?;
        self.brightness.check("brightness")?;
        self.contrast.check("contrast")?;
        self.gamma.check("gamma")?;
        self.low_res.check("low resolution")?;
        if self.scale.lo <= 0.0 || self.low_res.lo < 1.0 || self.blur_sigma.lo < 0.0 {
            return Err(Error::Config("augmentation ranges out of domain".into()));
        }
        Ok(())
    }
}

/// Image-only artifact simulation hook (motion, ghosting, spikes, bias field).
/// None are provided; the pipeline accepts user implementations.
pub trait ImageArtifact: Sync {
    fn probability(&self) -> f64;
    fn apply(&self, image: &mut Volume3D, rng: &mut dyn rand::RngCore);
}

pub fn augment(
    x: &Volume3D,
    y: &LabelVolume,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(Volume3D, LabelVolume)> {
    augment_with(x, y, cfg, &[], rng)
}

/// Spatial transforms hit image and labels alike; intensity transforms the image only.
pub fn augment_with(
    x: &Volume3D,
    y: &LabelVolume,
    cfg: &AugmentationConfig,
    artifacts: &[&dyn ImageArtifact],
    rng: &mut impl Rng,
) -> Result<(Volume3D, LabelVolume)> {
    x.geom().check_same(y.geom())?;
    let mut img = x.clone();
    let mut lab = y.clone();

    let angles: [f64; 3] = std::array::from_fn(|_| cfg.rotation_deg.fire(rng).unwrap_or(0.0));
    let scale = cfg.scale.fire(rng).unwrap_or(1.0);
    if angles.iter().any(|&a| a != 0.0) || scale != 1.0 {
        let (i2, l2) = resample(&img, &lab, angles, scale);
        img = i2;
        lab = l2;
    }
    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_p {
            img = flip(&img, axis);
            lab = flip(&lab, axis);
        }
    }

    if let Some(var) = cfg.noise_variance.fire(rng) {
        let normal = Normal::new(0.0, var.sqrt()).expect("valid std");
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
    }
    if let Some(sigma) = cfg.blur_sigma.fire(rng) {
        img = gaussian_blur(&img, sigma);
    }
    if let Some(f) = cfg.brightness.fire(rng) {
        img.data_mut().iter_mut().for_each(|v| *v *= f as f32);
    }
    if let Some(f) = cfg.contrast.fire(rng) {
        let (lo, hi, mean) = stats(&img);
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) * f + mean).clamp(lo, hi) as f32);
    }
    if let Some(f) = cfg.low_res.fire(rng) {
        img = simulate_low_res(&img, f);
    }
    if let Some(g) = cfg.gamma.fire(rng) {
        let invert = rng.random::<f64>() < cfg.gamma_invert_p;
        apply_gamma(&mut img, g, invert);
    }
    for a in artifacts {
        if rng.random::<f64>() < a.probability() {
            a.apply(&mut img, rng);
        }
    }
    Ok((img, lab))
}

fn stats(img: &Volume3D) -> (f64, f64, f64) {
    let d = img.data();
    let lo = d.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let hi = d.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    (lo, hi, mean)
}

fn apply_gamma(img: &mut Volume3D, gamma: f64, invert: bool) {
    let sign = if invert { -1.0 } else { 1.0 };
    let (lo, hi) = img.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        let v = sign * v as f64;
        (a.min(v), b.max(v))
    });
    let span = hi - lo;
    if span <= 0.0 {
        return;
    }
    img.data_mut().iter_mut().for_each(|v| {
        let u = (sign * *v as f64 - lo) / span;
        *v = (sign * (u.powf(gamma) * span + lo)) as f32;
    });
}

/// Mirrors a grid along one axis.
pub fn flip<T: Copy>(g: &Grid<T>, axis: usize) -> Grid<T> {
    let geom = *g.geom();
    let n = geom.shape()[axis];
    Grid::from_fn(geom, |mut p| {
        p[axis] = n - 1 - p[axis];
        g.get(p[0], p[1], p[2])
    })
}

fn rotation(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    // Composed about x, then y, then z.
    for (axis, deg) in angles_deg.into_iter().enumerate() {
        let (s, c) = deg.to_radians().sin_cos();
        let m = match axis {
            0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
            1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        };
        r = mat_mul(&m, &r);
    }
    r
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rotates and scales about the patch centre. Output voxel `o` reads the
/// source at `Rᵀ (o − c) / s + c`: trilinear for the image, nearest for labels.
fn resample(
    img: &Volume3D,
    lab: &LabelVolume,
    angles_deg: [f64; 3],
    scale: f64,
) -> (Volume3D, LabelVolume) {
    let geom = *img.geom();
    let r = rotation(angles_deg);
    let centre: [f64; 3] = std::array::from_fn(|a| (geom.shape()[a] as f64 - 1.0) / 2.0);
    let mut out_i = Vec::with_capacity(geom.len());
    let mut out_l = Vec::with_capacity(geom.len());
    for i in 0..geom.len() {
        let p = geom.coords(i);
        let d: [f64; 3] = std::array::from_fn(|a| (p[a] as f64 - centre[a]) / scale);
        let src: [f64; 3] =
            std::array::from_fn(|a| (0..3).map(|k| r[k][a] * d[k]).sum::<f64>() + centre[a]);
        out_i.push(trilinear(img, src));
        let nn: [isize; 3] = std::array::from_fn(|a| src[a].round() as isize);
        out_l.push(if geom.contains(nn) {
            lab.get(nn[0] as usize, nn[1] as usize, nn[2] as usize)
        } else {
            Label::Bg
        });
    }
    (
        Grid::new(geom, out_i).expect("same geometry"),
        Grid::new(geom, out_l).expect("same geometry"),
    )
}

fn trilinear(img: &Volume3D, p: [f64; 3]) -> f32 {
    let geom = img.geom();
    let base: [isize; 3] = std::array::from_fn(|a| p[a].floor() as isize);
    let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a] as f64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let q: [isize; 3] = std::array::from_fn(|a| base[a] + off[a] as isize);
        if !geom.contains(q) {
            continue;
        }
        let w: f64 = (0..3)
            .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
            .product();
        acc += w * img.get(q[0] as usize, q[1] as usize, q[2] as usize) as f64;
    }
    acc as f32
}

/// Separable Gaussian blur with kernel radius `ceil(3σ)`; edges are clamped.
pub fn gaussian_blur(img: &Volume3D, sigma: f64) -> Volume3D {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let geom = *img.geom();
    let mut cur: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        let n = geom.shape()[axis] as isize;
        let next: Vec<f64> = (0..geom.len())
            .map(|i| {
                let p = geom.coords(i);
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let mut q = p;
                        q[axis] = (p[axis] as isize + k as isize - radius).clamp(0, n - 1) as usize;
                        w * cur[geom.index(q[0], q[1], q[2])]
                    })
                    .sum()
            })
            .collect();
        cur = next;
    }
    Grid::new(geom, cur.into_iter().map(|v| v as f32).collect()).expect("same geometry")
}

/// Nearest-neighbour downsampling by `factor`, then trilinear upsampling back.
fn simulate_low_res(img: &Volume3D, factor: f64) -> Volume3D {
    let geom = *img.geom();
    let small: [usize; 3] =
        std::array::from_fn(|a| ((geom.shape()[a] as f64 / factor).round() as usize).max(1));
    let sg = Geometry::isotropic(small).expect("positive shape");
    let ratio: [f64; 3] = std::array::from_fn(|a| geom.shape()[a] as f64 / small[a] as f64);
    let low = Grid::from_fn(sg, |p| {
        let q: [usize; 3] = std::array::from_fn(|a| {
            (((p[a] as f64 + 0.5) * ratio[a]) as usize).min(geom.shape()[a] - 1)
        });
        img.get(q[0], q[1], q[2])
    });
    Grid::from_fn(geom, |p| {
        let src: [f64; 3] = std::array::from_fn(|a| {
            ((p[a] as f64 + 0.5) / ratio[a] - 0.5).clamp(0.0, small[a] as f64 - 1.0)
        });
        trilinear(&low, src)
    })
}
