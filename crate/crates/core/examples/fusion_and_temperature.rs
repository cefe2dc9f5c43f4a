//! Calibrates two binary ensembles by temperature, then fuses them into one
//! three-class prediction.

use partseg::labelspace::Class;
use partseg::strategies::{fuse_binary_predictions, temperature_scale, CalibrationSet, TemperatureConfig};
use partseg::volume::{Geometry, ProbVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Overconfident binary logits: labels follow `softmax(z)`, logits are `3z`.
fn overconfident(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<usize>) {
    let (mut logits, mut targets) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let z: f64 = rng.random_range(-3.0..3.0);
        let p1 = 1.0 / (1.0 + (-z).exp());
        targets.push(usize::from(rng.random::<f64>() < p1));
        logits.extend([0.0, 3.0 * z]);
    }
    (logits, targets)
}

fn main() -> partseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["WMH model", "ISL model"] {
        let (logits, targets) = overconfident(&mut rng, 20_000);
        let set = CalibrationSet::from_raw(2, logits, targets)?;
        let fit = temperature_scale(&set, &TemperatureConfig::default())?;
        println!(
            "{name}: T = {:.3} after {} iterations, validation CE {:.4} -> {:.4}",
            fit.temperature, fit.iterations, fit.ce_initial, fit.ce_final
        );
    }

    let g = Geometry::isotropic([1, 1, 3])?;
    let wmh = ProbVolume::new(g, vec![Class::Bg, Class::Wmh], vec![0.6, 0.4, 0.9, 0.1, 0.2, 0.8])?;
    let isl = ProbVolume::new(g, vec![Class::Bg, Class::Isl], vec![0.8, 0.2, 0.1, 0.9, 0.3, 0.7])?;
    let fused = fuse_binary_predictions(&wmh, &isl)?;
    for i in 0..g.len() {
        let v = fused.voxel(i);
        println!("voxel {i}: bg {:.4} wmh {:.4} isl {:.4}", v[0], v[1], v[2]);
    }
    Ok(())
}
