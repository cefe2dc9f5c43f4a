//! 26-connected component labelling (two-pass, union-find).

use crate::volume::{Grid, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    /// Component id per voxel; 0 is background, components are 1..=count
    /// numbered in order of first appearance in raster order.
    pub labels: Grid<u32>,
    pub count: usize,
    /// Voxel indices of component `k + 1`.
    pub voxels: Vec<Vec<usize>>,
}

impl ComponentLabeling {
    pub fn sizes(&self) -> Vec<usize> {
        self.voxels.iter().map(Vec::len).collect()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Neighbour offsets already visited in a raster scan (13 of the 26).
fn backward_offsets() -> Vec<[isize; 3]> {
    let mut v = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if (dz, dy, dx) < (0, 0, 0) {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

pub fn connected_components(mask: &Mask) -> ComponentLabeling {
    let geom = *mask.geom();
    let n = geom.len();
    let offsets = backward_offsets();
    // Provisional labels; parent[0] is unused.
    let mut prov = vec![0u32; n];
    let mut parent: Vec<u32> = vec![0];
    for i in 0..n {
        if !mask.data()[i] {
            continue;
        }
        let p = geom.coords(i);
        let mut root: Option<u32> = None;
        for o in &offsets {
            let q = [p[0] as isize + o[0], p[1] as isize + o[1], p[2] as isize + o[2]];
            if !geom.contains(q) {
                continue;
            }
            let j = geom.index(q[0] as usize, q[1] as usize, q[2] as usize);
            let l = prov[j];
            if l == 0 {
                continue;
            }
            let r = find(&mut parent, l);
            root = Some(match root {
                None => r,
                Some(a) if a == r => a,
                Some(a) => {
                    let (lo, hi) = if a < r { (a, r) } else { (r, a) };
                    parent[hi as usize] = lo;
                    lo
                }
            });
        }
        prov[i] = match root {
            Some(r) => r,
            None => {
                let id = parent.len() as u32;
                parent.push(id);
                id
            }
        };
    }
    let mut remap = vec![0u32; parent.len()];
    let mut voxels: Vec<Vec<usize>> = Vec::new();
    let mut labels = vec![0u32; n];
    for i in 0..n {
        if prov[i] == 0 {
            continue;
        }
        let r = find(&mut parent, prov[i]) as usize;
        if remap[r] == 0 {
            voxels.push(Vec::new());
            remap[r] = voxels.len() as u32;
        }
        labels[i] = remap[r];
        voxels[remap[r] as usize - 1].push(i);
    }
    ComponentLabeling {
        labels: Grid::new(geom, labels).expect("same geometry"),
        count: voxels.len(),
        voxels,
    }
}
