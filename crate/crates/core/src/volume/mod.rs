//! Dense 3D grids: images, label maps, binary masks and per-class channel volumes.
//!
//! All grids use one canonical voxel order: `x` varies fastest, then `y`, then
//! `z` (the NIfTI storage order). Orientation metadata beyond voxel spacing is
//! dropped at load time, so downstream index arithmetic never needs to know
//! how the scanner was oriented.

mod manifest;
mod nifti;

pub use manifest::{icv_voxels, Icv, Manifest, SampleRecord, Split, Subsets};
pub use nifti::{
    read_labels, read_mask, read_prob_volume, read_region_map, read_volume, write_volume,
    NiftiWritable,
};

use crate::error::{Error, Result};
use crate::labelspace::{Class, Label};

/// Shape and voxel spacing (mm) of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    shape: [usize; 3],
    spacing: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Data(format!("grid shape must be positive, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { shape, spacing })
    }

    /// 1 mm isotropic geometry.
    pub fn isotropic(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[0];
        let r = i / self.shape[0];
        [x, r % self.shape[1], r / self.shape[1]]
    }

    pub fn contains(&self, p: [isize; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.shape[a])
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub(crate) fn check_same(&self, other: &Geometry) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape.to_vec(),
                found: other.shape.to_vec(),
            });
        }
        Ok(())
    }
}

/// A scalar value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    geom: Geometry,
    data: Vec<T>,
}

/// FLAIR-like image intensities, stored as 32-bit floats.
pub type Volume3D = Grid<f32>;
/// Ground truth or predicted labels; mutual exclusivity is structural.
pub type LabelVolume = Grid<Label>;
pub type Mask = Grid<bool>;
/// Anatomical region ids from an external anatomy segmenter (0 = outside brain).
pub type RegionMap = Grid<u32>;

impl<T: Copy> Grid<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::Shape {
                expected: vec![geom.len()],
                found: vec![data.len()],
            });
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        Self {
            geom,
            data: vec![value; geom.len()],
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.coords(i))).collect();
        Self { geom, data }
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geom.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.geom.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

impl LabelVolume {
    /// Binary mask of voxels carrying `label`.
    pub fn mask_of(&self, label: Label) -> Mask {
        self.map(|l| l == label)
    }

    /// Builds a label map from per-class masks; the masks must not overlap.
    pub fn from_masks(wmh: Option<&Mask>, isl: Option<&Mask>, geom: Geometry) -> Result<Self> {
        let mut out = LabelVolume::filled(geom, Label::Bg);
        if let Some(m) = wmh {
            geom.check_same(m.geom())?;
            for (o, &w) in out.data.iter_mut().zip(m.data()) {
                if w {
                    *o = Label::Wmh;
                }
            }
        }
        if let Some(m) = isl {
            geom.check_same(m.geom())?;
            for (o, &s) in out.data.iter_mut().zip(m.data()) {
                if s {
                    if *o == Label::Wmh {
                        return Err(Error::Data(
                            "WMH and ISL masks overlap; classes must be mutually exclusive".into(),
                        ));
                    }
                    *o = Label::Isl;
                }
            }
        }
        Ok(out)
    }
}

/// Per-voxel vectors over a declared class list, stored channels-last
/// (`data[voxel * classes.len() + channel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    geom: Geometry,
    classes: Vec<Class>,
    data: Vec<f64>,
}

/// Per-voxel class probabilities; each voxel's vector lies on the simplex.
pub type ProbVolume = ChannelVolume;
/// Unnormalised per-voxel class scores.
pub type Logits = ChannelVolume;

impl ChannelVolume {
    pub fn new(geom: Geometry, classes: Vec<Class>, data: Vec<f64>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Data("channel volume needs at least one class".into()));
        }
        if data.len() != geom.len() * classes.len() {
            return Err(Error::Shape {
                expected: vec![geom.len(), classes.len()],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            geom,
            classes,
            data,
        })
    }

    pub fn zeros(geom: Geometry, classes: Vec<Class>) -> Self {
        let n = geom.len() * classes.len();
        Self {
            geom,
            classes,
            data: vec![0.0; n],
        }
    }

    pub fn geom(&self) -> &Geometry {
        &self.geom
    }

    pub fn classes(&self) -> &[Class] {
        &self.classes
    }

    pub fn channels(&self) -> usize {
        self.classes.len()
    }

    pub fn voxels(&self) -> usize {
        self.geom.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, i: usize) -> &[f64] {
        let k = self.classes.len();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn channel_index(&self, class: Class) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// One channel copied out as a contiguous vector.
    pub fn channel(&self, class: Class) -> Option<Vec<f64>> {
        let c = self.channel_index(class)?;
        let k = self.classes.len();
        Some(self.data.iter().skip(c).step_by(k).copied().collect())
    }

    /// Largest per-voxel deviation of the channel sum from 1.
    pub fn max_simplex_error(&self) -> f64 {
        self.data
            .chunks_exact(self.classes.len())
            .map(|v| (v.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest channel per voxel (first wins on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.classes.len())
            .map(|v| {
                let mut best = 0;
                for (c, &p) in v.iter().enumerate() {
                    if p > v[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Argmax decision mapped back into the three-class label space.
    ///
    /// Channels must be plain classes (`BG`, `WMH`, `ISL`).
    pub fn argmax_labels(&self) -> Result<LabelVolume> {
        let labels: Vec<Label> = self
            .classes
            .iter()
            .map(|c| {
                c.as_label().ok_or_else(|| {
                    Error::Data(format!("channel {c} has no single-label decision"))
                })
            })
            .collect::<Result<_>>()?;
        let data = self.argmax().into_iter().map(|c| labels[c]).collect();
        Grid::new(self.geom, data)
    }
}
