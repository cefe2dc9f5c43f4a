//! Scores a perturbed prediction against a reference and writes the
//! per-subject and aggregate CSVs plus a Bland-Altman plot.

use partseg::labelspace::{Class, Label};
use partseg::metrics::{
    aggregate, bland_altman, evaluate_subject, write_aggregate_csv, write_rows_csv, EvalConfig, Provenance,
};
use partseg::plots::bland_altman_svg;
use partseg::volume::{Geometry, LabelVolume, Mask, ProbVolume};

fn ball(c: [f64; 3], r: f64) -> impl Fn([usize; 3]) -> bool {
    move |p| (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r
}

fn main() -> partseg::Result<()> {
    let out = std::env::temp_dir().join("partseg-metrics");
    let g = Geometry::new([24, 24, 24], [1.0, 1.0, 1.5])?;
    let brain = Mask::from_fn(g, ball([12.0; 3], 11.0));
    let mut rows = Vec::new();
    for s in 0..6 {
        let shift = s as f64 * 0.4;
        let wmh = ball([8.0, 8.0, 12.0], 2.0 + 0.2 * s as f64);
        let isl = ball([15.0, 14.0, 12.0], 3.0);
        let gt = LabelVolume::from_fn(g, |p| {
            if isl(p) && s % 3 != 0 {
                Label::Isl
            } else if wmh(p) {
                Label::Wmh
            } else {
                Label::Bg
            }
        });
        let pw = ball([8.0 + shift, 8.0, 12.0], 2.2);
        let pi = ball([15.0, 14.0 + shift, 12.0], 2.8);
        let mut data = Vec::with_capacity(3 * g.len());
        for i in 0..g.len() {
            let p = g.coords(i);
            let (w, l) = (if pw(p) { 0.8 } else { 0.05 }, if pi(p) { 0.7 } else { 0.02 });
            data.extend([1.0 - w - l, w, l]);
        }
        let probs = ProbVolume::new(g, vec![Class::Bg, Class::Wmh, Class::Isl], data)?;
        rows.push(evaluate_subject(&format!("s{s}"), Some("demo"), &probs, &gt, &brain, &EvalConfig::default())?);
    }
    let agg = aggregate(&rows);
    let pct = |v: Option<f64>| v.map_or("NA".into(), |x| format!("{:.1}", 100.0 * x));
    println!(
        "AP wmh {} isl {}; DSC wmh {} isl {}; ISL FP {:.0}%",
        pct(agg.ap.wmh),
        pct(agg.ap.isl),
        pct(agg.dsc.wmh),
        pct(agg.dsc.isl),
        agg.fp_isl.unwrap_or(f64::NAN)
    );

    let prov = Provenance::default().with("generator", "metrics_report example");
    let named: Vec<(String, _)> = rows.iter().map(|r| ("demo".to_string(), r.clone())).collect();
    write_rows_csv(out.join("rows.csv"), &named, &prov)?;
    write_aggregate_csv(out.join("aggregate.csv"), &[("demo".to_string(), agg)], &prov)?;

    let pred: Vec<f64> = rows.iter().map(|r| r.class(Label::Wmh).vol_pred_ml).collect();
    let gt: Vec<f64> = rows.iter().map(|r| r.class(Label::Wmh).vol_gt_ml).collect();
    let ba = bland_altman(&pred, &gt)?;
    println!("WMH volume bias {:.4} ml, limits [{:.4}, {:.4}]", ba.mean_diff, ba.loa_low, ba.loa_high);
    bland_altman_svg(out.join("bland_altman_wmh.svg"), "WMH volume", &pred, &gt, &ba)?;
    println!("wrote {}", out.display());
    Ok(())
}
