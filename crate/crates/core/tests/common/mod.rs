//! Independent brute-force oracles shared by the integration tests and the
//! acceptance gate.
#![allow(dead_code)]

use partseg::labelspace::{loss_terms, Class, ClassSets, Label, LabelAvailability, Method};
use partseg::loss::{combined_loss_sets, LossConfig};
use partseg::model::VoxelClassifier;
use partseg::volume::{Geometry, Grid, LabelVolume, Logits, Mask, RegionMap, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FULL: [Class; 3] = [Class::Bg, Class::Wmh, Class::Isl];

// ---------------------------------------------------------------- losses

pub fn random_loss_case(seed: u64, space: &[Class], avail: LabelAvailability) -> (Logits, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::isotropic([4, 4, 4]).unwrap();
    let data = (0..geom.len() * space.len())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let logits = Logits::new(geom, space.to_vec(), data).unwrap();
    let labels = (0..geom.len())
        .map(|_| match rng.random_range(0..3) {
            1 if avail.has_wmh => Label::Wmh,
            2 if avail.has_isl => Label::Isl,
            _ => Label::Bg,
        })
        .collect();
    (logits, Grid::new(geom, labels).unwrap())
}

/// Worst central-difference error of the logit gradient, relative to the
/// gradient's largest entry.
pub fn loss_grad_rel_error(logits: &Logits, y: &LabelVolume, sets: &ClassSets) -> f64 {
    let cfg = LossConfig::default();
    let analytic = combined_loss_sets(logits, y, sets, &cfg).unwrap().grad_logits;
    let h = 1e-5;
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for j in 0..logits.data().len() {
        let mut plus = logits.clone();
        plus.data_mut()[j] += h;
        let mut minus = logits.clone();
        minus.data_mut()[j] -= h;
        let fp = combined_loss_sets(&plus, y, sets, &cfg).unwrap().total;
        let fm = combined_loss_sets(&minus, y, sets, &cfg).unwrap().total;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((numeric - analytic[j]).abs() / scale.max(1e-8));
    }
    worst
}

/// The class-set cases exercised by gradient checks:
/// `(name, logit space, availability, method)`.
pub fn gradient_cases() -> Vec<(&'static str, Vec<Class>, LabelAvailability, Method)> {
    vec![
        ("multiclass", FULL.to_vec(), LabelAvailability::FULL, Method::Multiclass),
        ("binary wmh", vec![Class::Bg, Class::Wmh], LabelAvailability::WMH_ONLY, Method::BinaryWmh),
        ("binary isl", vec![Class::Bg, Class::Isl], LabelAvailability::ISL_ONLY, Method::BinaryIsl),
        ("class-adaptive wmh", FULL.to_vec(), LabelAvailability::WMH_ONLY, Method::ClassAdaptive),
        ("class-adaptive isl", FULL.to_vec(), LabelAvailability::ISL_ONLY, Method::ClassAdaptive),
        ("marginal wmh", FULL.to_vec(), LabelAvailability::WMH_ONLY, Method::Marginal),
        ("marginal isl", FULL.to_vec(), LabelAvailability::ISL_ONLY, Method::Marginal),
    ]
}

/// Worst error over every loss term of one random case.
pub fn case_grad_error(seed: u64, space: &[Class], avail: LabelAvailability, method: Method) -> f64 {
    let (logits, y) = random_loss_case(seed, space, avail);
    loss_terms(avail, method)
        .unwrap()
        .iter()
        .map(|t| loss_grad_rel_error(&logits, &y, &t.sets))
        .fold(0.0, f64::max)
}

// --------------------------------------------------------------- network

pub fn random_patch(seed: u64, n: usize) -> (Volume3D, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::isotropic([n, n, n]).unwrap();
    let x = Volume3D::from_fn(g, |_| rng.random_range(-1.0..1.0));
    let y = LabelVolume::from_fn(g, |_| Label::from_code(rng.random_range(0..3)).unwrap());
    (x, y)
}

pub fn network_loss(m: &VoxelClassifier, x: &Volume3D, y: &LabelVolume, avail: LabelAvailability, method: Method) -> (f64, Vec<f64>) {
    let fwd = m.forward(x);
    let terms = loss_terms(avail, method).unwrap();
    let w = 1.0 / terms.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; m.num_heads()];
    for t in &terms {
        let v = combined_loss_sets(&fwd.logits()[t.head], y, &t.sets, &LossConfig::default())
            .unwrap()
            .scaled(w);
        total += v.total;
        grads[t.head] = Some(v.grad_logits);
    }
    let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
    (total, m.backward(&fwd, &refs))
}

/// Central differences over every parameter.
pub fn network_grad_rel_error(m: &VoxelClassifier, x: &Volume3D, y: &LabelVolume, avail: LabelAvailability, method: Method) -> f64 {
    let (_, analytic) = network_loss(m, x, y, avail, method);
    let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..m.params().len() {
        let mut p = m.clone();
        p.params_mut()[j] += h;
        let fp = network_loss(&p, x, y, avail, method).0;
        p.params_mut()[j] -= 2.0 * h;
        let fm = network_loss(&p, x, y, avail, method).0;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((numeric - analytic[j]).abs() / scale);
    }
    worst
}

// --------------------------------------------------------------- metrics

pub fn random_mask(rng: &mut ChaCha8Rng, geom: Geometry) -> Mask {
    let density = rng.random_range(0.05..0.6);
    Mask::from_fn(geom, |_| rng.random::<f64>() < density)
}

pub fn geom6(rng: &mut ChaCha8Rng, anisotropic: bool) -> Geometry {
    let spacing = if anisotropic {
        [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..3.0)]
    } else {
        [1.0; 3]
    };
    Geometry::new([6, 6, 6], spacing).unwrap()
}

/// 26-connected flood fill with an explicit stack; components as sorted
/// voxel lists.
pub fn oracle_components(m: &Mask) -> Vec<Vec<usize>> {
    let g = m.geom();
    let mut seen = vec![false; m.len()];
    let mut comps = Vec::new();
    for s in 0..m.len() {
        if !m.data()[s] || seen[s] {
            continue;
        }
        let mut comp = vec![];
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let p = g.coords(i);
            for j in 0..m.len() {
                let q = g.coords(j);
                let adjacent = (0..3).all(|a| p[a].abs_diff(q[a]) <= 1);
                if adjacent && m.data()[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort();
        comps.push(comp);
    }
    comps
}

fn dist2(g: &Geometry, i: usize, j: usize) -> f64 {
    let (a, b) = (g.coords(i), g.coords(j));
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * g.spacing()[k]).powi(2))
        .sum()
}

pub fn oracle_min_dist(g: &Geometry, i: usize, to: &Mask) -> f64 {
    (0..to.len())
        .filter(|&j| to.data()[j])
        .map(|j| dist2(g, i, j))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Foreground voxels with a 6-neighbour outside the mask or the grid.
pub fn oracle_surface(m: &Mask) -> Mask {
    let g = *m.geom();
    Mask::from_fn(g, |p| {
        if !m.get(p[0], p[1], p[2]) {
            return false;
        }
        let six = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
        six.iter().any(|d: &[isize; 3]| {
            let q = [p[0] as isize + d[0], p[1] as isize + d[1], p[2] as isize + d[2]];
            q.iter().zip(g.shape()).any(|(&c, n)| c < 0 || c >= n as isize)
                || !m.get(q[0] as usize, q[1] as usize, q[2] as usize)
        })
    })
}

/// All-pairs symmetric surface distance.
pub fn oracle_asd(p: &Mask, t: &Mask) -> f64 {
    let g = *p.geom();
    let (sp, st) = (oracle_surface(p), oracle_surface(t));
    let mut total = 0.0;
    for i in 0..g.len() {
        if sp.data()[i] {
            total += oracle_min_dist(&g, i, &st);
        }
        if st.data()[i] {
            total += oracle_min_dist(&g, i, &sp);
        }
    }
    total / (sp.count() + st.count()) as f64
}

/// Step-wise AP from an explicit sweep over every distinct threshold.
pub fn oracle_ap(probs: &[f64], gt: &Mask) -> f64 {
    let mut thresholds: Vec<f64> = probs.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = gt.count() as f64;
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in thresholds {
        let pred: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= t).collect();
        let tp = pred.iter().filter(|&&i| gt.data()[i]).count() as f64;
        let r = tp / pos;
        ap += (r - prev_r) * (tp / pred.len() as f64);
        prev_r = r;
    }
    ap
}

// ---------------------------------------------------------------- fusion

/// Two-class simplex draw.
pub fn random_pair(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let a = rng.random::<f64>();
    [a, 1.0 - a]
}

/// Hand rule: background is the smaller background, then renormalise.
pub fn oracle_fuse(wmh: [f64; 2], isl: [f64; 2]) -> [f64; 3] {
    let bg = wmh[0].min(isl[0]);
    let z = bg + wmh[1] + isl[1];
    [bg / z, wmh[1] / z, isl[1] / z]
}

// ----------------------------------------------------------- temperature

/// Mean CE of `softmax(z / t)` computed directly.
pub fn oracle_ce(logits: &[f64], targets: &[usize], k: usize, t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.chunks_exact(k).zip(targets) {
        let m = z.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v / t - m).exp()).sum::<f64>().ln();
        total += lse - z[y] / t;
    }
    total / targets.len() as f64
}

/// Golden-section minimisation of the CE over `log t` in `[lo, hi]`.
pub fn oracle_temperature(logits: &[f64], targets: &[usize], k: usize, lo: f64, hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |u: f64| oracle_ce(logits, targets, k, u.exp());
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    ((a + b) / 2.0).exp()
}

/// Logits with labels drawn from their own softmax, so `T = 1` is optimal in
/// expectation.
pub fn calibrated_logits(seed: u64, n: usize, k: usize, spread: f64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Vec::with_capacity(n * k);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-spread..spread)).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        let mut y = k - 1;
        for (j, wj) in w.iter().enumerate() {
            if u < *wj {
                y = j;
                break;
            }
            u -= wj;
        }
        logits.extend(z);
        targets.push(y);
    }
    (logits, targets)
}

// -------------------------------------------------------------- screening

/// A 6³ scan in normalised intensity: uniform tissue at 0.5 in region 2 and a
/// 20-voxel connected lesion (the first 20 voxels in index order). `near`
/// lesion voxels sit just above the tissue level; the rest are raised so the
/// lesion mean exceeds the tissue mean by `diff`.
pub fn screening_scan(diff: f64, near: usize) -> (Volume3D, Mask, RegionMap) {
    let g = Geometry::isotropic([6, 6, 6]).unwrap();
    let (tissue, eps, n) = (0.5f64, 0.001f64, 20usize);
    let high = tissue + (n as f64 * diff - near as f64 * eps) / (n - near) as f64;
    let mut x = Volume3D::filled(g, tissue as f32);
    let mut lesion = Mask::filled(g, false);
    for i in 0..n {
        lesion.data_mut()[i] = true;
        x.data_mut()[i] = if i < near { (tissue + eps) as f32 } else { high as f32 };
    }
    (x, lesion, RegionMap::filled(g, 2))
}
