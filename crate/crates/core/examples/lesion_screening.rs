//! Screens constructed scans for ISL visibility under both threshold presets.

use partseg::screening::{screen_scan, ScreeningConfig};
use partseg::volume::{Geometry, Mask, RegionMap, Volume3D};

/// Tissue at 0.5; a 3x3x3 lesion whose voxels sit `gap` above it, except
/// `dim` of them that match the tissue.
fn scan(gap: f32, dim: usize) -> (Volume3D, Mask, RegionMap) {
    let g = Geometry::isotropic([9, 9, 9]).unwrap();
    let inside = |p: [usize; 3]| p.iter().all(|&c| (3..6).contains(&c));
    let lesion = Mask::from_fn(g, inside);
    let mut k = 0;
    let x = Volume3D::from_fn(g, |p| {
        if !inside(p) {
            return 0.5;
        }
        k += 1;
        if k <= dim { 0.5 } else { 0.5 + gap }
    });
    (x, lesion, RegionMap::filled(g, 2))
}

fn main() -> partseg::Result<()> {
    for (gap, dim) in [(0.03, 0), (0.08, 0), (0.2, 0), (0.2, 4), (0.2, 8)] {
        let (x, lesion, regions) = scan(gap, dim);
        for (name, cfg) in [("isles", ScreeningConfig::ISLES), ("soop", ScreeningConfig::SOOP)] {
            let r = screen_scan(&x, &lesion, &regions, &cfg)?;
            let c = &r.components[0];
            println!(
                "gap {gap:.2} dim {dim}/27 {name:5}: diff {:.3} fraction {:.3} -> {:?}",
                c.diff, c.fraction_closer_to_normal, r.verdict
            );
        }
    }
    Ok(())
}
