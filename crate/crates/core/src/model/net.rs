//! Reference voxel classifier: a stack of 3×3×3 convolutions with leaky
//! rectifiers and one or more 1×1×1 output heads sharing that trunk.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labelspace::Class;
use crate::loss::softmax_probs;
use crate::rng;
use crate::volume::{Geometry, Logits, ProbVolume, Volume3D};

pub const LEAKY_SLOPE: f64 = 0.01;
const TAPS: usize = 27;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Output widths of the hidden 3×3×3 layers.
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![8, 8] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    /// Weights `[tap][cin][cout]`, followed by `cout` biases.
    offset: usize,
}

impl ConvLayer {
    fn weights(&self) -> usize {
        TAPS * self.cin * self.cout
    }

    fn len(&self) -> usize {
        self.weights() + self.cout
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HeadLayer {
    classes: Vec<Class>,
    /// Weights `[width][classes]`, followed by the biases.
    offset: usize,
}

/// All parameters live in one flat vector; layers address it by offset.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelClassifier {
    arch: Architecture,
    convs: Vec<ConvLayer>,
    heads: Vec<HeadLayer>,
    params: Vec<f64>,
}

/// Cached activations of one forward pass, needed by [`VoxelClassifier::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    geom: Geometry,
    /// `acts[0]` is the input; `acts[l + 1]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    logits: Vec<Logits>,
}

impl ForwardPass {
    pub fn logits(&self) -> &[Logits] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<Logits> {
        self.logits
    }
}

fn he_fill(out: &mut [f64], fan_in: usize, rng: &mut impl rand::Rng) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    out.iter_mut().for_each(|w| *w = normal.sample(rng));
}

impl VoxelClassifier {
    /// Fresh model with He-initialised weights and zero biases.
    pub fn new(arch: &Architecture, heads: &[Vec<Class>], seed: u64) -> Result<Self> {
        if arch.hidden.is_empty() || arch.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if heads.is_empty() || heads.iter().any(|h| h.len() < 2) {
            return Err(Error::Config("every head needs at least two classes".into()));
        }
        let mut convs = Vec::new();
        let mut offset = 0;
        let mut cin = 1;
        for &cout in &arch.hidden {
            let l = ConvLayer { cin, cout, offset };
            offset += l.len();
            convs.push(l);
            cin = cout;
        }
        let mut m = Self {
            arch: arch.clone(),
            convs,
            heads: Vec::new(),
            params: vec![0.0; offset],
        };
        let mut r = rng::stream(seed, &[rng::tag("trunk")]);
        for l in m.convs.clone() {
            he_fill(&mut m.params[l.offset..l.offset + l.weights()], TAPS * l.cin, &mut r);
        }
        m.set_heads(heads, seed);
        Ok(m)
    }

    fn width(&self) -> usize {
        self.convs.last().map_or(1, |l| l.cout)
    }

    fn set_heads(&mut self, heads: &[Vec<Class>], seed: u64) {
        let w = self.width();
        self.params.truncate(self.trunk_len());
        self.heads.clear();
        for (h, classes) in heads.iter().enumerate() {
            let offset = self.params.len();
            let n = w * classes.len();
            self.params.resize(offset + n + classes.len(), 0.0);
            let mut r = rng::stream(seed, &[rng::tag("head"), h as u64]);
            he_fill(&mut self.params[offset..offset + n], w, &mut r);
            self.heads.push(HeadLayer {
                classes: classes.clone(),
                offset,
            });
        }
    }

    /// Same trunk, freshly initialised heads.
    pub fn with_new_heads(&self, heads: &[Vec<Class>], seed: u64) -> Result<Self> {
        if heads.is_empty() || heads.iter().any(|h| h.len() < 2) {
            return Err(Error::Config("every head needs at least two classes".into()));
        }
        let mut m = self.clone();
        m.set_heads(heads, seed);
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn head_classes(&self) -> Vec<Vec<Class>> {
        self.heads.iter().map(|h| h.classes.clone()).collect()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn set_params(&mut self, p: Vec<f64>) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::Shape {
                expected: vec![self.params.len()],
                found: vec![p.len()],
            });
        }
        self.params = p;
        Ok(())
    }

    /// Number of parameters in the shared trunk (they come first).
    pub fn trunk_len(&self) -> usize {
        self.convs.iter().map(ConvLayer::len).sum()
    }

    /// SHA-256 over the little-endian bytes of the trunk parameters.
    pub fn trunk_digest(&self) -> String {
        digest(&self.params[..self.trunk_len()])
    }

    pub fn digest(&self) -> String {
        digest(&self.params)
    }

    pub fn forward(&self, x: &Volume3D) -> ForwardPass {
        let geom = *x.geom();
        let mut acts = vec![x.data().iter().map(|&v| v as f64).collect::<Vec<_>>()];
        for l in &self.convs {
            let w = &self.params[l.offset..l.offset + l.weights()];
            let b = &self.params[l.offset + l.weights()..l.offset + l.len()];
            let mut z = conv3(&geom, acts.last().unwrap(), l.cin, l.cout, w);
            for v in z.chunks_exact_mut(l.cout) {
                for (zo, bo) in v.iter_mut().zip(b) {
                    let t = *zo + bo;
                    *zo = if t > 0.0 { t } else { LEAKY_SLOPE * t };
                }
            }
            acts.push(z);
        }
        let a = acts.last().unwrap();
        let width = self.width();
        let logits = self
            .heads
            .iter()
            .map(|h| {
                let k = h.classes.len();
                let w = &self.params[h.offset..h.offset + width * k];
                let b = &self.params[h.offset + width * k..h.offset + width * k + k];
                let mut out = Vec::with_capacity(geom.len() * k);
                for v in a.chunks_exact(width) {
                    for c in 0..k {
                        let mut s = b[c];
                        for (i, &ai) in v.iter().enumerate() {
                            s += w[i * k + c] * ai;
                        }
                        out.push(s);
                    }
                }
                Logits::new(geom, h.classes.clone(), out).expect("consistent head shape")
            })
            .collect();
        ForwardPass { geom, acts, logits }
    }

    pub fn predict_logits(&self, x: &Volume3D) -> Vec<Logits> {
        self.forward(x).into_logits()
    }

    /// Softmax output of one head.
    pub fn predict_probs(&self, x: &Volume3D, head: usize) -> Result<ProbVolume> {
        let logits = self.predict_logits(x);
        let l = logits
            .get(head)
            .ok_or_else(|| Error::Config(format!("model has no head {head}")))?;
        softmax_probs(l)
    }

    /// Parameter gradient of `Σ grad_logits · logits`. Heads without a
    /// gradient contribute nothing.
    pub fn backward(&self, fwd: &ForwardPass, grad_logits: &[Option<&[f64]>]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let n = fwd.geom.len();
        let width = self.width();
        let a_last = fwd.acts.last().unwrap();
        let mut da = vec![0.0; n * width];
        for (h, g) in self.heads.iter().zip(grad_logits) {
            let Some(g) = g else { continue };
            let k = h.classes.len();
            let w = &self.params[h.offset..h.offset + width * k];
            let (gw, gb) = grad[h.offset..h.offset + width * k + k].split_at_mut(width * k);
            for ((gv, av), dav) in g
                .chunks_exact(k)
                .zip(a_last.chunks_exact(width))
                .zip(da.chunks_exact_mut(width))
            {
                for c in 0..k {
                    gb[c] += gv[c];
                }
                for i in 0..width {
                    let mut s = 0.0;
                    for c in 0..k {
                        gw[i * k + c] += av[i] * gv[c];
                        s += w[i * k + c] * gv[c];
                    }
                    dav[i] += s;
                }
            }
        }
        for (li, l) in self.convs.iter().enumerate().rev() {
            let out = &fwd.acts[li + 1];
            // Leaky rectifier preserves sign, so the output tells which branch fired.
            for (d, &a) in da.iter_mut().zip(out) {
                if a <= 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            }
            let (gw, gb) = grad[l.offset..l.offset + l.len()].split_at_mut(l.weights());
            for v in da.chunks_exact(l.cout) {
                for (b, d) in gb.iter_mut().zip(v) {
                    *b += d;
                }
            }
            let w = &self.params[l.offset..l.offset + l.weights()];
            let need_input_grad = li > 0;
            da = conv3_backward(&fwd.geom, &fwd.acts[li], &da, l.cin, l.cout, w, gw, need_input_grad);
        }
        grad
    }
}

pub fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Valid ranges of the output coordinate along one axis for tap offset `d`.
#[inline]
fn range(n: usize, d: isize) -> std::ops::Range<usize> {
    match d {
        -1 => 1..n,
        1 => 0..n.saturating_sub(1),
        _ => 0..n,
    }
}

fn taps() -> impl Iterator<Item = (usize, [isize; 3])> {
    (0..TAPS).map(|t| {
        let t_i = t as isize;
        (t, [t_i % 3 - 1, (t_i / 3) % 3 - 1, t_i / 9 - 1])
    })
}

/// Zero-padded 3×3×3 convolution without bias, channels-last.
fn conv3(geom: &Geometry, a: &[f64], cin: usize, cout: usize, w: &[f64]) -> Vec<f64> {
    match cout {
        4 => conv3_fixed::<4>(geom, a, cin, w),
        8 => conv3_fixed::<8>(geom, a, cin, w),
        12 => conv3_fixed::<12>(geom, a, cin, w),
        16 => conv3_fixed::<16>(geom, a, cin, w),
        _ => conv3_any(geom, a, cin, cout, w),
    }
}

fn conv3_fixed<const CO: usize>(geom: &Geometry, a: &[f64], cin: usize, w: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = geom.shape();
    let mut z = vec![0.0; geom.len() * CO];
    let offsets: Vec<(usize, [isize; 3], isize)> = taps()
        .map(|(t, d)| (t, d, d[0] + nx as isize * (d[1] + ny as isize * d[2])))
        .collect();
    let inside = |c: usize, d: isize, n: usize| {
        let q = c as isize + d;
        q >= 0 && q < n as isize
    };
    for zz in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                let v = xx + nx * (yy + ny * zz);
                let interior = xx > 0 && yy > 0 && zz > 0 && xx + 1 < nx && yy + 1 < ny && zz + 1 < nz;
                let mut acc = [0.0; CO];
                for &(t, d, shift) in &offsets {
                    if !interior && !(inside(xx, d[0], nx) && inside(yy, d[1], ny) && inside(zz, d[2], nz)) {
                        continue;
                    }
                    let nb = (v as isize + shift) as usize;
                    let src = &a[nb * cin..(nb + 1) * cin];
                    let wt = &w[t * cin * CO..(t + 1) * cin * CO];
                    for (i, &ai) in src.iter().enumerate() {
                        let wr: &[f64; CO] = wt[i * CO..(i + 1) * CO].try_into().unwrap();
                        for c in 0..CO {
                            acc[c] += ai * wr[c];
                        }
                    }
                }
                z[v * CO..(v + 1) * CO].copy_from_slice(&acc);
            }
        }
    }
    z
}

fn conv3_any(geom: &Geometry, a: &[f64], cin: usize, cout: usize, w: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = geom.shape();
    let mut z = vec![0.0; geom.len() * cout];
    for (t, [dx, dy, dz]) in taps() {
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        let shift = dx + nx as isize * (dy + ny as isize * dz);
        for zz in range(nz, dz) {
            for yy in range(ny, dy) {
                let row = nx * (yy + ny * zz);
                for xx in range(nx, dx) {
                    let v = row + xx;
                    let nb = (v as isize + shift) as usize;
                    let src = &a[nb * cin..(nb + 1) * cin];
                    let dst = &mut z[v * cout..(v + 1) * cout];
                    for (i, &ai) in src.iter().enumerate() {
                        let wr = &wt[i * cout..(i + 1) * cout];
                        for (d, &wv) in dst.iter_mut().zip(wr) {
                            *d += ai * wv;
                        }
                    }
                }
            }
        }
    }
    z
}

/// Accumulates the weight gradient into `gw` and returns the input gradient
/// (empty when `need_input_grad` is false).
#[allow(clippy::too_many_arguments)]
fn conv3_backward(
    geom: &Geometry,
    a: &[f64],
    dz: &[f64],
    cin: usize,
    cout: usize,
    w: &[f64],
    gw: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    match cout {
        4 => conv3_backward_fixed::<4>(geom, a, dz, cin, w, gw, need_input_grad),
        8 => conv3_backward_fixed::<8>(geom, a, dz, cin, w, gw, need_input_grad),
        12 => conv3_backward_fixed::<12>(geom, a, dz, cin, w, gw, need_input_grad),
        16 => conv3_backward_fixed::<16>(geom, a, dz, cin, w, gw, need_input_grad),
        _ => conv3_backward_any(geom, a, dz, cin, cout, w, gw, need_input_grad),
    }
}

fn conv3_backward_fixed<const CO: usize>(
    geom: &Geometry,
    a: &[f64],
    dz: &[f64],
    cin: usize,
    w: &[f64],
    gw: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let [nx, ny, nz] = geom.shape();
    let mut da = if need_input_grad {
        vec![0.0; geom.len() * cin]
    } else {
        Vec::new()
    };
    for (t, [dx, dy, dzo]) in taps() {
        let wt = &w[t * cin * CO..(t + 1) * cin * CO];
        let gt = &mut gw[t * cin * CO..(t + 1) * cin * CO];
        let shift = dx + nx as isize * (dy + ny as isize * dzo);
        for zz in range(nz, dzo) {
            for yy in range(ny, dy) {
                let row = nx * (yy + ny * zz);
                for xx in range(nx, dx) {
                    let v = row + xx;
                    let nb = (v as isize + shift) as usize;
                    let g: &[f64; CO] = dz[v * CO..(v + 1) * CO].try_into().unwrap();
                    let src = &a[nb * cin..(nb + 1) * cin];
                    for (i, &ai) in src.iter().enumerate() {
                        let gr: &mut [f64; CO] = (&mut gt[i * CO..(i + 1) * CO]).try_into().unwrap();
                        for c in 0..CO {
                            gr[c] += ai * g[c];
                        }
                    }
                    if need_input_grad {
                        let dst = &mut da[nb * cin..(nb + 1) * cin];
                        for (i, d) in dst.iter_mut().enumerate() {
                            let wr: &[f64; CO] = wt[i * CO..(i + 1) * CO].try_into().unwrap();
                            let mut s = 0.0;
                            for c in 0..CO {
                                s += wr[c] * g[c];
                            }
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    da
}

#[allow(clippy::too_many_arguments)]
fn conv3_backward_any(
    geom: &Geometry,
    a: &[f64],
    dz: &[f64],
    cin: usize,
    cout: usize,
    w: &[f64],
    gw: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let [nx, ny, nz] = geom.shape();
    let mut da = if need_input_grad {
        vec![0.0; geom.len() * cin]
    } else {
        Vec::new()
    };
    for (t, [dx, dy, dzo]) in taps() {
        let wt = &w[t * cin * cout..(t + 1) * cin * cout];
        let gt = &mut gw[t * cin * cout..(t + 1) * cin * cout];
        let shift = dx + nx as isize * (dy + ny as isize * dzo);
        for zz in range(nz, dzo) {
            for yy in range(ny, dy) {
                let row = nx * (yy + ny * zz);
                for xx in range(nx, dx) {
                    let v = row + xx;
                    let nb = (v as isize + shift) as usize;
                    let g = &dz[v * cout..(v + 1) * cout];
                    let src = &a[nb * cin..(nb + 1) * cin];
                    for i in 0..cin {
                        let gr = &mut gt[i * cout..(i + 1) * cout];
                        let ai = src[i];
                        for (gg, &d) in gr.iter_mut().zip(g) {
                            *gg += ai * d;
                        }
                    }
                    if need_input_grad {
                        let dst = &mut da[nb * cin..(nb + 1) * cin];
                        for i in 0..cin {
                            let wr = &wt[i * cout..(i + 1) * cout];
                            let mut s = 0.0;
                            for (&wv, &d) in wr.iter().zip(g) {
                                s += wv * d;
                            }
                            dst[i] += s;
                        }
                    }
                }
            }
        }
    }
    da
}

/// Mean of the models' probability volumes for one head.
pub fn ensemble_predict(models: &[VoxelClassifier], x: &Volume3D, head: usize) -> Result<ProbVolume> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    let mut acc = first.predict_probs(x, head)?;
    for m in rest {
        let p = m.predict_probs(x, head)?;
        if p.classes() != acc.classes() {
            return Err(Error::Config("ensemble members disagree on output classes".into()));
        }
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
    }
    let k = models.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}
