//! Exact Euclidean distance transform with anisotropic spacing, via the
//! separable lower-envelope-of-parabolas algorithm.

use crate::error::{Error, Result};
use crate::volume::{Grid, Mask};

/// Squared distances along one line of samples spaced `h` apart.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * h;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest mask voxel.
pub fn squared_distance_transform(mask: &Mask) -> Result<Grid<f64>> {
    if !mask.any() {
        return Err(Error::Data("distance transform of an empty mask".into()));
    }
    let geom = *mask.geom();
    let shape = geom.shape();
    let spacing = geom.spacing();
    let mut d: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = shape[axis];
        let stride = match axis {
            0 => 1,
            1 => shape[0],
            _ => shape[0] * shape[1],
        };
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..geom.len() {
            if geom.coords(start)[axis] != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * stride];
            }
            edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                d[start + k * stride] = *o;
            }
        }
    }
    Grid::new(geom, d)
}

/// Euclidean distance (mm) from every voxel to the nearest mask voxel.
pub fn distance_transform(mask: &Mask) -> Result<Grid<f64>> {
    Ok(squared_distance_transform(mask)?.map(f64::sqrt))
}
