//! Trains a marginal-loss ensemble on every partially labelled subject and
//! scores it on the test split.

use partseg::metrics::aggregate;
use partseg::strategies::{run_strategy, Dataset, Strategy, StrategyConfig};
use partseg::synthgen::{generate, SynthConfig};

fn main() -> partseg::Result<()> {
    let dir = std::env::temp_dir().join("partseg-train-marginal");
    let synth = SynthConfig {
        n_train: 40,
        n_val: 3,
        n_test: 6,
        ..SynthConfig::default()
    };
    let data = Dataset::load(generate(&synth, &dir)?)?;

    let mut cfg = StrategyConfig::desk(0);
    cfg.trainer.epochs = 30;
    cfg.ensemble_size = 2;
    let trained = run_strategy(Strategy::Marginal, &data, &cfg)?;
    for log in &trained.logs {
        println!("seed {}: best epoch {} validation DSC {:.3}", log.seed, log.best_epoch, log.val_dsc);
    }
    let rows = trained.evaluate(&data, &cfg.eval.to_config())?;
    let agg = aggregate(&rows);
    let pct = |v: Option<f64>| v.map_or("NA".into(), |x| format!("{:.1}", 100.0 * x));
    println!("test AP wmh {} isl {}; DSC wmh {} isl {}", pct(agg.ap.wmh), pct(agg.ap.isl), pct(agg.dsc.wmh), pct(agg.dsc.isl));
    Ok(())
}
