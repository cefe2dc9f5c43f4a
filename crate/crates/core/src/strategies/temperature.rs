//! Post-hoc temperature calibration of softmax outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::restrict_to_space;
use crate::volume::{LabelVolume, Logits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub max_iterations: usize,
    /// Stop once a step changes `log T` by less than this.
    pub tolerance: f64,
    /// `T` is confined to `[1/max_temperature, max_temperature]`.
    #[serde(default = "default_max_temperature")]
    pub max_temperature: f64,
}

fn default_max_temperature() -> f64 {
    100.0
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-6,
            max_temperature: default_max_temperature(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub iterations: usize,
    pub ce_initial: f64,
    pub ce_final: f64,
    /// False when the optimum did not beat `T = 1` and the fit fell back to it.
    pub accepted: bool,
}

/// Flattened logits with the index of the target channel per voxel.
pub struct CalibrationSet {
    channels: usize,
    logits: Vec<f64>,
    targets: Vec<usize>,
}

impl CalibrationSet {
    /// Pairs each voxel's logits with its label, mapped into the logits'
    /// class space (labels outside it count as the class covering them).
    pub fn new(logits: &[Logits], labels: &[LabelVolume]) -> Result<Self> {
        if logits.is_empty() || logits.len() != labels.len() {
            return Err(Error::Data("temperature scaling needs labelled validation volumes".into()));
        }
        let classes = logits[0].classes().to_vec();
        let mut out = Self {
            channels: classes.len(),
            logits: Vec::new(),
            targets: Vec::new(),
        };
        for (l, y) in logits.iter().zip(labels) {
            l.geom().check_same(y.geom())?;
            if l.classes() != classes {
                return Err(Error::Config("calibration volumes disagree on classes".into()));
            }
            let y = restrict_to_space(y, &classes);
            for (i, &lab) in y.data().iter().enumerate() {
                let t = classes
                    .iter()
                    .position(|c| c.covers(lab))
                    .ok_or_else(|| Error::Data(format!("label {lab:?} outside {classes:?}")))?;
                out.targets.push(t);
                out.logits.extend_from_slice(l.voxel(i));
            }
        }
        Ok(out)
    }

    /// Directly from flat row-major logits and target channels.
    pub fn from_raw(channels: usize, logits: Vec<f64>, targets: Vec<usize>) -> Result<Self> {
        if channels < 2 || logits.len() != channels * targets.len() || targets.is_empty() || targets.iter().any(|&t| t >= channels) {
            return Err(Error::Data("malformed calibration set".into()));
        }
        Ok(Self {
            channels,
            logits,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Mean CE at scale `s = 1/T`, with its first and second derivatives in `s`.
    fn ce_derivs(&self, s: f64) -> (f64, f64, f64) {
        let k = self.channels;
        let (mut f, mut g, mut h) = (0.0, 0.0, 0.0);
        let mut p = vec![0.0; k];
        for (z, &t) in self.logits.chunks_exact(k).zip(&self.targets) {
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v * s));
            let mut sum = 0.0;
            for (pj, &zj) in p.iter_mut().zip(z) {
                *pj = (zj * s - m).exp();
                sum += *pj;
            }
            let mut ez = 0.0;
            let mut ez2 = 0.0;
            for (pj, &zj) in p.iter_mut().zip(z) {
                *pj /= sum;
                ez += *pj * zj;
                ez2 += *pj * zj * zj;
            }
            f += m + sum.ln() - z[t] * s;
            g += ez - z[t];
            h += ez2 - ez * ez;
        }
        let n = self.len() as f64;
        (f / n, g / n, h / n)
    }

    /// Mean cross-entropy of `softmax(logits / T)`.
    pub fn cross_entropy(&self, temperature: f64) -> f64 {
        self.ce_derivs(1.0 / temperature).0
    }
}

/// Minimises the calibration CE over `u = log T` with a safeguarded Newton
/// iteration. The result is kept only if it does not increase the CE.
pub fn temperature_scale(set: &CalibrationSet, cfg: &TemperatureConfig) -> Result<TemperatureFit> {
    if set.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    // f(u) = CE(s = e^{-u}); f' = -s g, f'' = s g + s^2 h.
    let eval = |u: f64| {
        let s = (-u).exp();
        let (f, g, h) = set.ce_derivs(s);
        (f, -s * g, s * g + s * s * h)
    };
    let bound = cfg.max_temperature.max(1.0).ln();
    let ce_initial = set.cross_entropy(1.0);
    let mut u = 0.0;
    let (mut f, mut d1, mut d2) = eval(u);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut step = if d2 > 0.0 { -d1 / d2 } else { -d1.signum() * 0.5 };
        step = step.clamp(-1.0, 1.0).clamp(-bound - u, bound - u);
        if step == 0.0 {
            break;
        }
        let mut moved = false;
        for _ in 0..60 {
            let (nf, n1, n2) = eval(u + step);
            if nf.is_finite() && nf <= f {
                u += step;
                (f, d1, d2) = (nf, n1, n2);
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || step.abs() < cfg.tolerance {
            break;
        }
    }
    if !f.is_finite() {
        return Err(Error::Numerical("temperature scaling diverged".into()));
    }
    let accepted = f <= ce_initial;
    Ok(TemperatureFit {
        temperature: if accepted { u.exp() } else { 1.0 },
        iterations,
        ce_initial,
        ce_final: if accepted { f } else { ce_initial },
        accepted,
    })
}

/// Divides logits by `T` in place.
pub fn apply_temperature(logits: &mut Logits, temperature: f64) {
    logits.data_mut().iter_mut().for_each(|v| *v /= temperature);
}
