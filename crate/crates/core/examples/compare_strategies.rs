//! Runs every strategy on a small synthetic dataset with a shortened
//! schedule and writes the consolidated report.
//!
//! The full-size comparison is `partseg compare --manifest <m> --preset desk`.

use partseg::cli::{cmd_compare, provenance};
use partseg::strategies::{Dataset, Strategy, StrategyConfig};
use partseg::synthgen::{generate, SynthConfig};

fn main() -> partseg::Result<()> {
    let root = std::env::temp_dir().join("partseg-compare");
    let synth = SynthConfig {
        n_train: 40,
        n_val: 3,
        n_test: 6,
        ..SynthConfig::default()
    };
    let data = Dataset::load(generate(&synth, root.join("data"))?)?;
    let mut cfg = StrategyConfig::desk(0);
    cfg.preset = "example".into();
    cfg.trainer.epochs = 30;
    cfg.ensemble_size = 1;
    let prov = provenance(&cfg, &root.join("data/manifest.json"), &data.manifest)?;
    let report = cmd_compare(&data, &Strategy::ALL, &cfg, &prov, &root.join("report"))?;
    for (name, a) in &report.summary.aggregates {
        let pct = |v: Option<f64>| v.map_or("  NA".into(), |x| format!("{:4.1}", 100.0 * x));
        let fp = a.fp_isl.map_or("NA".into(), |v| format!("{v:.0}%"));
        println!("{name:22} AP wmh {} isl {}  ISL FP {fp}", pct(a.ap.wmh), pct(a.ap.isl));
    }
    for (s, e) in &report.failures {
        println!("{s} failed: {e}");
    }
    println!("report in {}", root.join("report").display());
    Ok(())
}
