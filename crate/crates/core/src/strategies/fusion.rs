//! Combining two binary predictions into one three-class prediction.

use crate::error::{Error, Result};
use crate::labelspace::Class;
use crate::volume::ProbVolume;

/// Per voxel: `b = min(bg_A, bg_B)`, then `(b, p_WMH, p_ISL)` is normalised.
pub fn fuse_binary_predictions(wmh: &ProbVolume, isl: &ProbVolume) -> Result<ProbVolume> {
    wmh.geom().check_same(isl.geom())?;
    if wmh.classes() != [Class::Bg, Class::Wmh] || isl.classes() != [Class::Bg, Class::Isl] {
        return Err(Error::Config(format!(
            "fusion expects [BG, WMH] and [BG, ISL] inputs, got {:?} and {:?}",
            wmh.classes(),
            isl.classes()
        )));
    }
    let mut out = Vec::with_capacity(wmh.voxels() * 3);
    for i in 0..wmh.voxels() {
        let (a, b) = (wmh.voxel(i), isl.voxel(i));
        let bg = a[0].min(b[0]);
        let z = bg + a[1] + b[1];
        if !(z > 0.0) {
            return Err(Error::Numerical(format!("fusion: all-zero voxel {i}")));
        }
        out.extend_from_slice(&[bg / z, a[1] / z, b[1] / z]);
    }
    ProbVolume::new(*wmh.geom(), vec![Class::Bg, Class::Wmh, Class::Isl], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn pv(classes: [Class; 2], p: f64) -> ProbVolume {
        let g = Geometry::isotropic([1, 1, 1]).unwrap();
        ProbVolume::new(g, classes.to_vec(), vec![p, 1.0 - p]).unwrap()
    }

    #[test]
    fn worked_example() {
        let f = fuse_binary_predictions(&pv([Class::Bg, Class::Wmh], 0.6), &pv([Class::Bg, Class::Isl], 0.8)).unwrap();
        let v = f.voxel(0);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn certain_background_stays_background() {
        let f = fuse_binary_predictions(&pv([Class::Bg, Class::Wmh], 1.0), &pv([Class::Bg, Class::Isl], 1.0)).unwrap();
        assert_eq!(f.voxel(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_wrong_class_lists() {
        let a = pv([Class::Bg, Class::Isl], 0.5);
        assert!(fuse_binary_predictions(&a, &a).is_err());
    }
}
