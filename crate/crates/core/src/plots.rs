//! Minimal static SVG renderings of the report figures.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BlandAltman;

const W: f64 = 640.0;
const H: f64 = 420.0;
const M: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        let pad = ((hi - lo) * 0.08).max(1e-9);
        Self {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn map(&self, v: f64, a: f64, b: f64) -> f64 {
        a + (v - self.lo) / (self.hi - self.lo) * (b - a)
    }
}

fn frame(title: &str, xlabel: &str, ylabel: &str, x: &Axis, y: &Axis) -> String {
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>
"#,
        W / 2.0,
        esc(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 15.0,
        esc(xlabel),
        H / 2.0,
        H / 2.0,
        esc(ylabel),
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let yv = y.lo + f * (y.hi - y.lo);
        let py = y.map(yv, H - M, M);
        let _ = writeln!(s, r#"<text x="{}" y="{py:.1}" text-anchor="end">{yv:.3}</text>"#, M - 4.0);
        if x.hi > x.lo {
            let xv = x.lo + f * (x.hi - x.lo);
            let px = x.map(xv, M, W - M);
            let _ = writeln!(s, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#, H - M + 14.0);
        }
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn save(path: &Path, mut svg: String) -> Result<()> {
    svg.push_str("</svg>\n");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Difference against mean of paired volumes, with bias and limits of agreement.
pub fn bland_altman_svg(path: impl AsRef<Path>, title: &str, pred: &[f64], gt: &[f64], summary: &BlandAltman) -> Result<()> {
    let means: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p + g) / 2.0).collect();
    let diffs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let x = Axis::fit(means.iter().copied());
    let y = Axis::fit(diffs.iter().copied().chain([summary.loa_low, summary.loa_high, 0.0]));
    let mut s = frame(title, "mean of predicted and reference volume (ml)", "predicted - reference (ml)", &x, &y);
    for (m, d) in means.iter().zip(&diffs) {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4" fill-opacity="0.7"/>"##,
            x.map(*m, M, W - M),
            y.map(*d, H - M, M)
        );
    }
    for (v, label, dash) in [
        (summary.mean_diff, format!("bias {:.4}", summary.mean_diff), ""),
        (summary.loa_low, format!("-1.96 SD {:.4}", summary.loa_low), "4 3"),
        (summary.loa_high, format!("+1.96 SD {:.4}", summary.loa_high), "4 3"),
    ] {
        let py = y.map(v, H - M, M);
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="crimson" stroke-dasharray="{dash}"/><text x="{}" y="{:.1}" text-anchor="end" fill="crimson">{label}</text>"#,
            W - M,
            W - M,
            py - 3.0
        );
    }
    save(path.as_ref(), s)
}

/// Quartiles by linear interpolation, and whiskers at the most extreme
/// values within 1.5 IQR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
    let iqr = q3 - q1;
    let whisker_low = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(q1);
    let whisker_high = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(q3);
    Some(BoxStats {
        n: v.len(),
        q1,
        median,
        q3,
        whisker_low,
        whisker_high,
    })
}

/// Boxes grouped by cohort, one colour per method.
/// `groups[g] = (cohort, [(method, values)])`.
pub fn grouped_boxplot_svg(path: impl AsRef<Path>, title: &str, ylabel: &str, groups: &[(String, Vec<(String, Vec<f64>)>)]) -> Result<()> {
    let all = groups.iter().flat_map(|(_, ms)| ms.iter().flat_map(|(_, v)| v.iter().copied()));
    let y = Axis::fit(all);
    let x = Axis { lo: 0.0, hi: 0.0 };
    let mut s = frame(title, "cohort", ylabel, &x, &y);
    let slot = (W - 2.0 * M) / groups.len().max(1) as f64;
    let methods: Vec<&String> = groups.first().map(|(_, ms)| ms.iter().map(|(m, _)| m).collect()).unwrap_or_default();
    for (gi, (cohort, ms)) in groups.iter().enumerate() {
        let x0 = M + gi as f64 * slot;
        let bw = slot * 0.8 / ms.len().max(1) as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x0 + slot / 2.0, H - M + 14.0, esc(cohort));
        for (mi, (_, vals)) in ms.iter().enumerate() {
            let Some(b) = box_stats(vals) else { continue };
            let c = PALETTE[mi % PALETTE.len()];
            let bx = x0 + slot * 0.1 + mi as f64 * bw;
            let cx = bx + bw / 2.0;
            let py = |v: f64| y.map(v, H - M, M);
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{c}"/><rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{c}" fill-opacity="0.35" stroke="{c}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="2"/>"#,
                py(b.whisker_low),
                py(b.whisker_high),
                bx + 1.0,
                py(b.q3),
                (bw - 2.0).max(1.0),
                (py(b.q1) - py(b.q3)).max(0.5),
                bx + 1.0,
                py(b.median),
                bx + bw - 1.0,
                py(b.median),
            );
        }
    }
    for (mi, m) in methods.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - M - 150.0,
            M + mi as f64 * 14.0,
            PALETTE[mi % PALETTE.len()],
            W - M - 136.0,
            M + mi as f64 * 14.0 + 9.0,
            esc(m)
        );
    }
    save(path.as_ref(), s)
}
