//! Cross-entropy + soft Dice over arbitrary class sets, with analytic
//! gradients with respect to the logits.
//!
//! Each loss term sees the model's softmax output marginalised onto its class
//! set: a merged member's probability is the sum of the channels it absorbs.
//! Gradients flow back through that sum and then through the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{
    class_set_for, member_channels, one_hot, restrict_to_space, ClassSet, ClassSets,
    LabelAvailability, Method,
};
use crate::volume::{ChannelVolume, LabelVolume, Logits, ProbVolume};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { dice_epsilon: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("dice_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to one head's logits
/// (channels-last, same layout as the logits).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub grad_logits: Vec<f64>,
}

impl LossValue {
    /// Multiplies value and gradient by `f` (used to average dual-head terms).
    pub fn scaled(mut self, f: f64) -> Self {
        self.total *= f;
        self.ce *= f;
        self.dice *= f;
        self.grad_logits.iter_mut().for_each(|g| *g *= f);
        self
    }
}

/// Value of one term plus its gradient with respect to the channel probabilities.
struct Part {
    value: f64,
    grad_probs: Vec<f64>,
}

/// Per-voxel softmax with max subtraction.
pub fn softmax_probs(logits: &Logits) -> Result<ProbVolume> {
    let k = logits.channels();
    let mut out = Vec::with_capacity(logits.data().len());
    for v in logits.data().chunks_exact(k) {
        if v.iter().any(|z| z.is_nan()) {
            return Err(Error::Numerical("NaN logit".into()));
        }
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &z in v {
            let e = (z - m).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= s);
    }
    ChannelVolume::new(*logits.geom(), logits.classes().to_vec(), out)
}

/// Backpropagates `dL/dp` through the softmax: `dL/dz_k = p_k (g_k − Σ_j p_j g_j)`.
pub fn softmax_backward(probs: &ProbVolume, grad_probs: &[f64]) -> Vec<f64> {
    let k = probs.channels();
    let mut out = vec![0.0; grad_probs.len()];
    for ((p, g), o) in probs
        .data()
        .chunks_exact(k)
        .zip(grad_probs.chunks_exact(k))
        .zip(out.chunks_exact_mut(k))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for c in 0..k {
            o[c] = p[c] * (g[c] - dot);
        }
    }
    out
}

/// Member probabilities `q[i * |cs| + m]` and the channel groups behind them.
fn marginal(probs: &ProbVolume, cs: &ClassSet) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let groups = member_channels(probs.classes(), cs)?;
    let k = probs.channels();
    let m = cs.len();
    let mut q = vec![0.0; probs.voxels() * m];
    for (i, v) in probs.data().chunks_exact(k).enumerate() {
        for (c, g) in groups.iter().enumerate() {
            q[i * m + c] = g.iter().map(|&ch| v[ch]).sum();
        }
    }
    Ok((q, groups))
}

/// Spreads `dL/dq` over member channels back onto the output channels.
fn scatter(gq: &[f64], groups: &[Vec<usize>], k: usize) -> Vec<f64> {
    let m = groups.len();
    let n = gq.len() / m;
    let mut g = vec![0.0; n * k];
    for i in 0..n {
        for (c, grp) in groups.iter().enumerate() {
            for &ch in grp {
                g[i * k + ch] += gq[i * m + c];
            }
        }
    }
    g
}

fn check_targets(probs: &ProbVolume, targets: &ChannelVolume, cs: &ClassSet) -> Result<()> {
    probs.geom().check_same(targets.geom())?;
    if targets.classes() != cs.members() {
        return Err(Error::Data(format!(
            "targets are over {:?}, expected class set {cs}",
            targets.classes()
        )));
    }
    Ok(())
}

fn ce_part(probs: &ProbVolume, targets: &ChannelVolume, cs: &ClassSet) -> Result<Part> {
    check_targets(probs, targets, cs)?;
    let (q, groups) = marginal(probs, cs)?;
    let n = probs.voxels() as f64;
    let mut value = 0.0;
    let mut gq = vec![0.0; q.len()];
    for ((&qi, &yi), g) in q.iter().zip(targets.data()).zip(gq.iter_mut()) {
        if yi != 0.0 {
            let c = qi.max(PROB_FLOOR);
            value -= yi * c.ln();
            if qi > PROB_FLOOR {
                *g = -yi / (n * qi);
            }
        }
    }
    Ok(Part {
        value: value / n,
        grad_probs: scatter(&gq, &groups, probs.channels()),
    })
}

fn dice_part(
    probs: &ProbVolume,
    targets: &ChannelVolume,
    cs: &ClassSet,
    cfg: &LossConfig,
) -> Result<Part> {
    check_targets(probs, targets, cs)?;
    let (q, groups) = marginal(probs, cs)?;
    let m = cs.len();
    let eps = cfg.dice_epsilon;
    let y = targets.data();
    let mut value = 0.0;
    let mut gq = vec![0.0; q.len()];
    for c in 0..m {
        let (mut inter, mut sy, mut sq) = (0.0, 0.0, 0.0);
        for i in (c..q.len()).step_by(m) {
            inter += y[i] * q[i];
            sy += y[i];
            sq += q[i];
        }
        let num = 2.0 * inter + eps;
        let den = sy + sq + eps;
        value -= num / den;
        let scale = -1.0 / (m as f64 * den * den);
        for i in (c..q.len()).step_by(m) {
            gq[i] = scale * (2.0 * y[i] * den - num);
        }
    }
    Ok(Part {
        value: value / m as f64,
        grad_probs: scatter(&gq, &groups, probs.channels()),
    })
}

/// `−1/N Σ_i Σ_{c∈cs} y log ȳ` and its gradient with respect to the logits
/// that produced `probs`.
pub fn cross_entropy(
    probs: &ProbVolume,
    targets: &ChannelVolume,
    cs: &ClassSet,
) -> Result<(f64, Vec<f64>)> {
    let p = ce_part(probs, targets, cs)?;
    Ok((p.value, softmax_backward(probs, &p.grad_probs)))
}

/// `−1/|cs| Σ_c (2Σyȳ + ε)/(Σy + Σȳ + ε)` and its gradient with respect to the logits.
pub fn dice_loss(
    probs: &ProbVolume,
    targets: &ChannelVolume,
    cs: &ClassSet,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let p = dice_part(probs, targets, cs, cfg)?;
    Ok((p.value, softmax_backward(probs, &p.grad_probs)))
}

/// CE + Dice for explicit class sets.
///
/// Labels a head cannot represent (ISL for a `[BG, WMH]` head) are treated as BG.
pub fn combined_loss_sets(
    logits: &Logits,
    y: &LabelVolume,
    sets: &ClassSets,
    cfg: &LossConfig,
) -> Result<LossValue> {
    logits.geom().check_same(y.geom())?;
    let probs = softmax_probs(logits)?;
    let y = restrict_to_space(y, logits.classes());
    let t_ce = one_hot(&y, &sets.ce)?;
    let t_dice = if sets.dice == sets.ce {
        t_ce.clone()
    } else {
        one_hot(&y, &sets.dice)?
    };
    let ce = ce_part(&probs, &t_ce, &sets.ce)?;
    let dice = dice_part(&probs, &t_dice, &sets.dice, cfg)?;
    let g: Vec<f64> = ce
        .grad_probs
        .iter()
        .zip(&dice.grad_probs)
        .map(|(a, b)| a + b)
        .collect();
    let total = ce.value + dice.value;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (ce={}, dice={})",
            ce.value, dice.value
        )));
    }
    Ok(LossValue {
        total,
        ce: ce.value,
        dice: dice.value,
        grad_logits: softmax_backward(&probs, &g),
    })
}

/// CE + Dice with the class sets the method prescribes for this sample.
pub fn combined_loss(
    logits: &Logits,
    y: &LabelVolume,
    avail: LabelAvailability,
    method: Method,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let sets = class_set_for(avail, method)?;
    combined_loss_sets(logits, y, &sets, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::{Class, Label};
    use crate::volume::{Geometry, Grid};
    use Class::*;

    fn g(n: usize) -> Geometry {
        Geometry::isotropic([n, 1, 1]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let l = Logits::new(g(1), vec![Bg, Wmh, Isl], vec![0.0; 3]).unwrap();
        for p in softmax_probs(&l).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = Logits::new(g(1), vec![Bg, Wmh, Isl], vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let p = softmax_probs(&l).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[1] - 0.25).abs() < 1e-15);
        let shifted = Logits::new(g(1), vec![Bg, Wmh, Isl], vec![2f64.ln() + 7.0, 7.0, 7.0]).unwrap();
        let q = softmax_probs(&shifted).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let bad = Logits::new(g(1), vec![Bg, Wmh], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_probs(&bad).is_err());
    }

    #[test]
    fn ce_single_voxel() {
        let cs = ClassSet::new([Bg, Wmh, Isl]).unwrap();
        let p = ProbVolume::new(g(1), vec![Bg, Wmh, Isl], vec![0.2, 0.5, 0.3]).unwrap();
        let y = Grid::new(g(1), vec![Label::Wmh]).unwrap();
        let (v, _) = cross_entropy(&p, &one_hot(&y, &cs).unwrap(), &cs).unwrap();
        assert!((v - 0.5f64.ln().abs()).abs() < 1e-12);
        // Class-adaptive {WMH} on a BG voxel has no term.
        let wm = ClassSet::new([Wmh]).unwrap();
        let y = Grid::new(g(1), vec![Label::Bg]).unwrap();
        let (v, grad) = cross_entropy(&p, &one_hot(&y, &wm).unwrap(), &wm).unwrap();
        assert_eq!(v, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dice_four_voxels() {
        let cs = ClassSet::new([Wmh]).unwrap();
        let cfg = LossConfig { dice_epsilon: 1e-12 };
        let p = ProbVolume::new(g(4), vec![Bg, Wmh], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
            .unwrap();
        let y = Grid::new(g(4), vec![Label::Wmh, Label::Wmh, Label::Bg, Label::Bg]).unwrap();
        let (v, _) = dice_loss(&p, &one_hot(&y, &cs).unwrap(), &cs, &cfg).unwrap();
        assert!((v + 2.0 / 3.0).abs() < 1e-9);
        // Empty prediction of an empty class counts as perfect.
        let y0 = Grid::new(g(4), vec![Label::Bg; 4]).unwrap();
        let p0 = ProbVolume::new(g(4), vec![Bg, Wmh], [1.0, 0.0].repeat(4)).unwrap();
        let (v, _) = dice_loss(&p0, &one_hot(&y0, &cs).unwrap(), &cs, &LossConfig::default())
            .unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_overlap_is_minus_one() {
        let n = 200;
        let cs = ClassSet::new([Wmh]).unwrap();
        let labels: Vec<Label> = (0..n).map(|i| if i < 120 { Label::Wmh } else { Label::Bg }).collect();
        let y = Grid::new(g(n), labels.clone()).unwrap();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| if l == Label::Wmh { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        let p = ProbVolume::new(g(n), vec![Bg, Wmh], data).unwrap();
        let (v, _) = dice_loss(&p, &one_hot(&y, &cs).unwrap(), &cs, &LossConfig::default()).unwrap();
        assert!((v + 1.0).abs() < 1e-4);
    }

    #[test]
    fn scaled_halves_everything() {
        let v = LossValue {
            total: 2.0,
            ce: 1.5,
            dice: 0.5,
            grad_logits: vec![4.0, -2.0],
        }
        .scaled(0.5);
        assert_eq!((v.total, v.ce, v.dice), (1.0, 0.75, 0.25));
        assert_eq!(v.grad_logits, vec![2.0, -1.0]);
    }
}
