//! The batch workflows behind each subcommand, callable from code.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::evaluation::{write_evaluation, EvaluationSummary, MethodRows};
use super::store::{load_trained, save_trained};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_subject, EvalConfig, MetricRow, Provenance};
use crate::screening::{screen_raw, write_diagnostics_csv, ScreenResult, ScreeningConfig, SideCollapse, Verdict};
use crate::strategies::{
    calibrate, generate_pseudolabels, run_strategy, Dataset, Role, Strategy, StrategyConfig,
    TrainedStrategy,
};
use crate::synthgen::{generate, SynthConfig};
use crate::volume::{
    read_mask, read_prob_volume, read_region_map, read_volume, write_volume, Manifest, Split,
};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Digest over the digests of every file a manifest references, in order.
pub fn dataset_digest(m: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    for r in &m.samples {
        let paths = [Some(&r.image), r.wmh_label.as_ref(), r.isl_label.as_ref(), Some(&r.brain_mask), r.region_map.as_ref()];
        for p in paths.into_iter().flatten() {
            h.update(file_digest(&m.resolve(p))?.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Seed, preset, configuration and input digests for emitted files.
pub fn provenance(cfg: &StrategyConfig, manifest_path: &Path, manifest: &Manifest) -> Result<Provenance> {
    Ok(Provenance::default()
        .with("generator", concat!("partseg ", env!("CARGO_PKG_VERSION")))
        .with("seed", cfg.trainer.seed)
        .with("preset", &cfg.preset)
        .with("config_sha256", sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
        .with("manifest_sha256", file_digest(manifest_path)?)
        .with("dataset_sha256", dataset_digest(manifest)?))
}

/// Resolves `desk`, `full` or a JSON file holding a full configuration.
/// `seed` overrides the configured seed when given.
pub fn load_preset(name: &str, seed: Option<u64>) -> Result<StrategyConfig> {
    let mut cfg = if name == "desk" || name == "full" {
        StrategyConfig::preset(name, seed.unwrap_or(0))?
    } else {
        let p = Path::new(name);
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{name}: {e}")))?
    };
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    generate(cfg, out)
}

/// Completes missing labels with a marginal-loss teacher stored in `teacher_dir`.
pub fn cmd_pseudolabel(data: &Dataset, teacher_dir: &Path, out: &Path) -> Result<Manifest> {
    let teacher = load_trained(Strategy::Marginal, teacher_dir).map_err(|_| {
        Error::Config(format!(
            "no marginal-loss checkpoints in {}; train the marginal strategy first",
            teacher_dir.display()
        ))
    })?;
    generate_pseudolabels(&teacher.member(Role::Main)?.checkpoints, data, out)
}

/// Trains one strategy into `<out>/<strategy>/`. Pseudolabels read their
/// teacher from `<out>/marginal/`.
pub fn cmd_train(data: &Dataset, strategy: Strategy, cfg: &StrategyConfig, out: &Path) -> Result<TrainedStrategy> {
    let dir = out.join(strategy.name());
    let trained = if strategy == Strategy::Pseudolabels {
        let pm = cmd_pseudolabel(data, &out.join(Strategy::Marginal.name()), &dir.join("data"))?;
        run_strategy(strategy, &Dataset::load(pm)?, cfg)?
    } else {
        run_strategy(strategy, data, cfg)?
    };
    save_trained(&trained, &dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(trained)
}

/// Writes one `<id>_probs.nii.gz` per subject of `split`.
pub fn cmd_predict(data: &Dataset, trained: &TrainedStrategy, split: Split, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let subjects: Vec<_> = data.split(split).collect();
    subjects
        .par_iter()
        .map(|s| {
            let p = out.join(format!("{}_probs.nii.gz", s.id));
            write_volume(&trained.predict(&s.image)?, &p)?;
            Ok(p)
        })
        .collect()
}

/// Where predictions come from for evaluation.
pub enum PredictionSource<'a> {
    Trained(&'a TrainedStrategy),
    /// Directory of `<id>_probs.nii.gz` files.
    Directory(&'a Path),
}

/// Scores every test subject. Per-subject failures are returned alongside
/// the rows instead of aborting.
pub fn score(data: &Dataset, source: &PredictionSource, cfg: &EvalConfig) -> (Vec<MetricRow>, Vec<(String, Error)>) {
    let subjects: Vec<_> = data.split(Split::Test).collect();
    let results: Vec<(String, Result<MetricRow>)> = subjects
        .par_iter()
        .map(|s| {
            let probs = match source {
                PredictionSource::Trained(t) => t.predict(&s.image),
                PredictionSource::Directory(d) => read_prob_volume(d.join(format!("{}_probs.nii.gz", s.id))),
            };
            let row = probs.and_then(|p| evaluate_subject(&s.id, s.cohort.as_deref(), &p, &s.labels, &s.brain, cfg));
            (s.id.clone(), row)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((id, e)),
        }
    }
    (rows, failures)
}

pub fn cmd_evaluate(
    data: &Dataset,
    name: &str,
    source: &PredictionSource,
    cfg: &StrategyConfig,
    prov: &Provenance,
    out: &Path,
) -> Result<(EvaluationSummary, Vec<(String, Error)>)> {
    let (rows, failures) = score(data, source, &cfg.eval.to_config());
    let methods = [MethodRows {
        name: name.to_string(),
        rows: Some(rows),
    }];
    let prov = prov.clone().with("failed_subjects", failures.len());
    Ok((write_evaluation(out, &methods, &prov)?, failures))
}

pub struct ScreenSummary {
    pub results: Vec<(String, ScreenResult)>,
    pub kept: usize,
    pub discarded: usize,
    pub manifest: Manifest,
}

/// Screens every record with an ISL label; writes the filtered manifest and
/// per-component diagnostics.
pub fn cmd_screen(manifest: &Manifest, cfg: &ScreeningConfig, collapse: &SideCollapse, out: &Path) -> Result<ScreenSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let verdicts: Vec<(String, Option<ScreenResult>)> = manifest
        .samples
        .par_iter()
        .map(|r| -> Result<(String, Option<ScreenResult>)> {
            let Some(isl) = &r.isl_label else {
                return Ok((r.id.clone(), None));
            };
            let regions = r
                .region_map
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: screening needs a region map", r.id)))?;
            let res = screen_raw(
                &read_volume(manifest.resolve(&r.image))?,
                &read_mask(manifest.resolve(isl))?,
                &read_region_map(manifest.resolve(regions))?,
                collapse,
                cfg,
            )?;
            Ok((r.id.clone(), Some(res)))
        })
        .collect::<Result<_>>()?;
    let mut kept_records = Vec::new();
    let mut results = Vec::new();
    let mut discarded = 0;
    for (rec, (id, v)) in manifest.samples.iter().zip(verdicts) {
        let discard = v.as_ref().map(|r| r.verdict == Verdict::Discard).unwrap_or(false);
        if discard {
            discarded += 1;
        } else {
            let mut r = rec.clone();
            for p in [&mut r.image, &mut r.brain_mask] {
                *p = manifest.resolve(p);
            }
            for p in [&mut r.wmh_label, &mut r.isl_label, &mut r.region_map].into_iter().flatten() {
                *p = manifest.resolve(p);
            }
            kept_records.push(r);
        }
        if let Some(v) = v {
            results.push((id, v));
        }
    }
    let header = format!(
        "# schema: partseg-screening/1\n# mean_diff_threshold: {}\n# fraction_threshold: {}\n",
        cfg.mean_diff_threshold, cfg.fraction_threshold
    );
    write_diagnostics_csv(out.join("screening.csv"), &results, &header)?;
    let kept = kept_records.len();
    let filtered = Manifest::new(format!("{}-screened", manifest.dataset_name), kept_records)?.with_base_dir(out);
    filtered.save(out.join("manifest.json"))?;
    Ok(ScreenSummary {
        results,
        kept,
        discarded,
        manifest: filtered,
    })
}

pub struct CompareReport {
    pub summary: EvaluationSummary,
    /// Strategies that failed, with the reason; their report rows are empty.
    pub failures: Vec<(Strategy, Error)>,
}

/// Training order: the baseline first and the marginal teacher before
/// pseudolabels; the rest in report order.
pub fn run_order(requested: &[Strategy]) -> Result<Vec<Strategy>> {
    let mut order: Vec<Strategy> = Strategy::ALL.into_iter().filter(|s| requested.contains(s)).collect();
    if order.contains(&Strategy::Pseudolabels) {
        if !order.contains(&Strategy::Marginal) {
            return Err(Error::Config("pseudolabels need the marginal strategy in the same comparison".into()));
        }
        order.retain(|s| *s != Strategy::Pseudolabels);
        let m = order.iter().position(|s| *s == Strategy::Marginal).expect("checked above");
        order.insert(m + 1, Strategy::Pseudolabels);
    }
    Ok(order)
}

/// Trains and evaluates every requested strategy on the shared test split
/// and writes one consolidated report under `out`.
pub fn cmd_compare(
    data: &Dataset,
    requested: &[Strategy],
    cfg: &StrategyConfig,
    prov: &Provenance,
    out: &Path,
) -> Result<CompareReport> {
    let order = run_order(requested)?;
    let train_dir = out.join("train");
    let eval = cfg.eval.to_config();
    let mut results: Vec<(Strategy, Result<Vec<MetricRow>>)> = Vec::new();
    let mut multimodel: Option<TrainedStrategy> = None;
    for s in order {
        let trained = match s {
            // Calibration reuses the uncalibrated ensemble when it was trained.
            Strategy::MultiModelTs if multimodel.is_some() => {
                let t = calibrate(multimodel.clone().expect("checked"), data, &cfg.temperature);
                if let Ok(t) = &t {
                    save_trained(t, &train_dir.join(s.name()))?;
                }
                t
            }
            _ => cmd_train(data, s, cfg, &train_dir),
        };
        if s == Strategy::MultiModel {
            multimodel = trained.as_ref().ok().cloned();
        }
        let rows = trained.and_then(|t| {
            let (rows, failures) = score(data, &PredictionSource::Trained(&t), &eval);
            match failures.into_iter().next() {
                Some((id, e)) => Err(Error::Data(format!("{id}: {e}"))),
                None => Ok(rows),
            }
        });
        results.push((s, rows));
    }
    results.sort_by_key(|(s, _)| Strategy::ALL.iter().position(|k| k == s));
    let mut failures = Vec::new();
    let mut methods = Vec::new();
    for (s, r) in results {
        let rows = match r {
            Ok(rows) => Some(rows),
            Err(e) => {
                failures.push((s, e));
                None
            }
        };
        methods.push(MethodRows {
            name: s.display_name().to_string(),
            rows,
        });
    }
    let names: Vec<&str> = requested.iter().map(|s| s.name()).collect();
    let prov = prov.clone().with("strategies", names.join(","));
    write_json(&out.join("config.json"), cfg)?;
    let summary = write_evaluation(out, &methods, &prov)?;
    Ok(CompareReport { summary, failures })
}
