//! CSV emission for per-subject rows, per-method aggregates and volume agreement.
//!
//! Every file starts with `#` provenance lines, then a header row. Percent
//! families (AP, DSC, DDSC, LPRE, LREC, FP) are written in %, AVD in % of ICV,
//! ASD in mm. Undefined values are written as `NA`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Aggregate, BlandAltman, ClassMetrics, FamilyMeans, MetricRow};
use crate::error::{Error, Result};

pub const ROWS_SCHEMA: &str = "partseg-rows/1";
pub const AGGREGATE_SCHEMA: &str = "partseg-aggregate/1";

pub const AGGREGATE_COLUMNS: [&str; 20] = [
    "method", "ap_wmh", "ap_isl", "ap_mean", "dsc_wmh", "dsc_isl", "dsc_mean", "avd_wmh",
    "avd_isl", "avd_mean", "asd_wmh", "asd_isl", "asd_mean", "lpre_wmh", "lpre_isl", "lpre_mean",
    "lrec_wmh", "lrec_isl", "lrec_mean", "fp_isl",
];

/// Ordered key/value pairs echoed at the top of every emitted file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance(pub Vec<(String, String)>);

impl Provenance {
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn header(&self, schema: &str) -> String {
        let mut s = format!("# schema: {schema}\n");
        for (k, v) in &self.0 {
            s.push_str(&format!("# {k}: {}\n", v.replace('\n', " ")));
        }
        s
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{:.4}", x * 100.0))
}

fn fixed(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.digits$}"))
}

fn write_with_header(path: &Path, comment: String, records: Vec<Vec<String>>) -> Result<()> {
    let mut buf = comment.into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in records {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn class_cells(m: &ClassMetrics) -> Vec<String> {
    vec![
        pct(m.ap),
        pct(m.dsc),
        pct(m.ddsc),
        fixed(m.avd, 6),
        fixed(m.asd, 4),
        pct(m.lpre),
        pct(m.lrec),
        format!("{:.6}", m.vol_pred_ml),
        format!("{:.6}", m.vol_gt_ml),
    ]
}

/// One row per subject (and per method when `method` columns are mixed).
pub fn write_rows_csv(path: impl AsRef<Path>, rows: &[(String, MetricRow)], prov: &Provenance) -> Result<()> {
    let mut header = vec!["method".to_string(), "subject".into(), "cohort".into()];
    for c in ["wmh", "isl"] {
        for f in ["ap", "dsc", "ddsc", "avd", "asd", "lpre", "lrec", "vol_pred_ml", "vol_gt_ml"] {
            header.push(format!("{f}_{c}"));
        }
    }
    header.push("isl_fp".into());
    let mut records = vec![header];
    for (method, r) in rows {
        let mut rec = vec![method.clone(), r.subject.clone(), r.cohort.clone().unwrap_or_default()];
        rec.extend(class_cells(&r.wmh));
        rec.extend(class_cells(&r.isl));
        rec.push(match r.isl_fp {
            Some(true) => "1".into(),
            Some(false) => "0".into(),
            None => "NA".into(),
        });
        records.push(rec);
    }
    write_with_header(path.as_ref(), prov.header(ROWS_SCHEMA), records)
}

fn family(f: &FamilyMeans, fmt: impl Fn(Option<f64>) -> String) -> [String; 3] {
    [fmt(f.wmh), fmt(f.isl), fmt(f.mean)]
}

fn aggregate_cells(a: &Aggregate) -> Vec<String> {
    let mut rec = Vec::with_capacity(AGGREGATE_COLUMNS.len() - 1);
    rec.extend(family(&a.ap, pct));
    rec.extend(family(&a.dsc, pct));
    rec.extend(family(&a.avd, |v| fixed(v, 6)));
    rec.extend(family(&a.asd, |v| fixed(v, 4)));
    rec.extend(family(&a.lpre, pct));
    rec.extend(family(&a.lrec, pct));
    rec.push(fixed(a.fp_isl, 4));
    rec
}

/// One row per method, columns in [`AGGREGATE_COLUMNS`] order.
pub fn write_aggregate_csv(
    path: impl AsRef<Path>,
    methods: &[(String, Aggregate)],
    prov: &Provenance,
) -> Result<()> {
    let mut records = vec![AGGREGATE_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for (name, a) in methods {
        let mut rec = vec![name.clone()];
        rec.extend(aggregate_cells(a));
        records.push(rec);
    }
    write_with_header(path.as_ref(), prov.header(AGGREGATE_SCHEMA), records)
}

/// Like [`write_aggregate_csv`] with a `cohort` column after `method`.
pub fn write_cohort_csv(
    path: impl AsRef<Path>,
    groups: &[(String, String, Aggregate)],
    prov: &Provenance,
) -> Result<()> {
    let mut header: Vec<String> = vec!["method".into(), "cohort".into(), "n_subjects".into()];
    header.extend(AGGREGATE_COLUMNS[1..].iter().map(|s| s.to_string()));
    let mut records = vec![header];
    for (method, cohort, a) in groups {
        let mut rec = vec![method.clone(), cohort.clone(), a.n_subjects.to_string()];
        rec.extend(aggregate_cells(a));
        records.push(rec);
    }
    write_with_header(path.as_ref(), prov.header("partseg-cohorts/1"), records)
}

/// Writes arbitrary string records under the provenance header.
pub fn write_table_csv(path: impl AsRef<Path>, schema: &str, records: Vec<Vec<String>>, prov: &Provenance) -> Result<()> {
    write_with_header(path.as_ref(), prov.header(schema), records)
}

/// Paired volumes, with the agreement summary in the comment header.
pub fn write_bland_altman_csv(
    path: impl AsRef<Path>,
    subjects: &[String],
    pred_ml: &[f64],
    gt_ml: &[f64],
    summary: &BlandAltman,
    prov: &Provenance,
) -> Result<()> {
    let prov = prov
        .clone()
        .with("n", summary.n)
        .with("mean_diff_ml", format!("{:.6}", summary.mean_diff))
        .with("sd_diff_ml", format!("{:.6}", summary.sd))
        .with("loa_low_ml", format!("{:.6}", summary.loa_low))
        .with("loa_high_ml", format!("{:.6}", summary.loa_high));
    let mut records = vec![vec![
        "subject".to_string(),
        "pred_ml".into(),
        "gt_ml".into(),
        "mean_ml".into(),
        "diff_ml".into(),
    ]];
    for ((s, p), g) in subjects.iter().zip(pred_ml).zip(gt_ml) {
        records.push(vec![
            s.clone(),
            format!("{p:.6}"),
            format!("{g:.6}"),
            format!("{:.6}", (p + g) / 2.0),
            format!("{:.6}", p - g),
        ]);
    }
    write_with_header(path.as_ref(), prov.header("partseg-bland-altman/1"), records)
}

/// Reads an emitted CSV back as `(column, cell)` pairs per record, skipping comments.
pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<(String, String)>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers()?.clone();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(out)
}
