//! Evaluation outputs shared by `evaluate` and `compare`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;
use crate::labelspace::Label;
use crate::metrics::{
    aggregate, aggregate_by_cohort, bland_altman, write_aggregate_csv, write_bland_altman_csv,
    write_cohort_csv, write_rows_csv, write_table_csv, Aggregate, BlandAltman, ClassMetrics,
    MetricRow, Provenance,
};
use crate::plots::{bland_altman_svg, grouped_boxplot_svg};

/// Evaluated rows of one method; `None` when the method failed.
pub struct MethodRows {
    pub name: String,
    pub rows: Option<Vec<MetricRow>>,
}

pub struct EvaluationSummary {
    pub aggregates: Vec<(String, Aggregate)>,
    pub bland_altman: Vec<(String, Label, BlandAltman)>,
}

fn slug(s: &str) -> String {
    let s: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

fn class_name(l: Label) -> &'static str {
    match l {
        Label::Isl => "isl",
        _ => "wmh",
    }
}

/// Writes `rows.csv`, `aggregate.csv`, `cohorts.csv`,
/// `bland_altman_summary.csv`, `bland_altman/*` and `boxplots/*` under `out`.
pub fn write_evaluation(out: &Path, methods: &[MethodRows], prov: &Provenance) -> Result<EvaluationSummary> {
    let all_rows: Vec<(String, MetricRow)> = methods
        .iter()
        .flat_map(|m| m.rows.iter().flatten().map(|r| (m.name.clone(), r.clone())))
        .collect();
    write_rows_csv(out.join("rows.csv"), &all_rows, prov)?;

    let aggregates: Vec<(String, Aggregate)> = methods
        .iter()
        .map(|m| (m.name.clone(), m.rows.as_deref().map(aggregate).unwrap_or_default()))
        .collect();
    write_aggregate_csv(out.join("aggregate.csv"), &aggregates, prov)?;

    let mut cohorts = Vec::new();
    for m in methods {
        for (c, a) in aggregate_by_cohort(m.rows.as_deref().unwrap_or(&[])) {
            cohorts.push((m.name.clone(), c, a));
        }
    }
    write_cohort_csv(out.join("cohorts.csv"), &cohorts, prov)?;

    let mut ba = Vec::new();
    let mut ba_records = vec![["method", "class", "n", "mean_diff_ml", "sd_diff_ml", "loa_low_ml", "loa_high_ml"]
        .map(String::from)
        .to_vec()];
    for m in methods {
        let Some(rows) = &m.rows else { continue };
        if rows.len() < 2 {
            continue;
        }
        for label in Label::FOREGROUND {
            let subjects: Vec<String> = rows.iter().map(|r| r.subject.clone()).collect();
            let pred: Vec<f64> = rows.iter().map(|r| r.class(label).vol_pred_ml).collect();
            let gt: Vec<f64> = rows.iter().map(|r| r.class(label).vol_gt_ml).collect();
            let s = bland_altman(&pred, &gt)?;
            let stem = format!("{}_{}", slug(&m.name), class_name(label));
            let p = prov.clone().with("method", &m.name).with("class", class_name(label));
            write_bland_altman_csv(out.join("bland_altman").join(format!("{stem}.csv")), &subjects, &pred, &gt, &s, &p)?;
            bland_altman_svg(
                out.join("bland_altman").join(format!("{stem}.svg")),
                &format!("{} volume agreement: {}", class_name(label).to_uppercase(), m.name),
                &pred,
                &gt,
                &s,
            )?;
            ba_records.push(vec![
                m.name.clone(),
                class_name(label).into(),
                s.n.to_string(),
                format!("{:.6}", s.mean_diff),
                format!("{:.6}", s.sd),
                format!("{:.6}", s.loa_low),
                format!("{:.6}", s.loa_high),
            ]);
            ba.push((m.name.clone(), label, s));
        }
    }
    write_table_csv(out.join("bland_altman_summary.csv"), "partseg-bland-altman-summary/1", ba_records, prov)?;

    let families: [(&str, fn(&ClassMetrics) -> Option<f64>); 2] = [("dsc", |c| c.dsc), ("ap", |c| c.ap)];
    for (fam, get) in families {
        for label in Label::FOREGROUND {
            let mut records = vec![["method", "cohort", "subject", "value_pct"].map(String::from).to_vec()];
            let mut groups: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
            for m in methods {
                let Some(rows) = &m.rows else { continue };
                for r in rows {
                    let cohort = r.cohort.clone().unwrap_or_default();
                    let slot = groups.entry(cohort.clone()).or_default();
                    if slot.last().map(|(n, _)| n != &m.name).unwrap_or(true) {
                        slot.push((m.name.clone(), vec![]));
                    }
                    if let Some(v) = get(r.class(label)) {
                        slot.last_mut().expect("pushed above").1.push(v * 100.0);
                        records.push(vec![m.name.clone(), cohort, r.subject.clone(), format!("{:.4}", v * 100.0)]);
                    }
                }
            }
            let stem = format!("{fam}_{}", class_name(label));
            write_table_csv(out.join("boxplots").join(format!("{stem}.csv")), "partseg-boxplot/1", records, prov)?;
            let groups: Vec<_> = groups.into_iter().collect();
            grouped_boxplot_svg(
                out.join("boxplots").join(format!("{stem}.svg")),
                &format!("{} {} by cohort", class_name(label).to_uppercase(), fam.to_uppercase()),
                &format!("{} (%)", fam.to_uppercase()),
                &groups,
            )?;
        }
    }
    Ok(EvaluationSummary {
        aggregates,
        bland_altman: ba,
    })
}
