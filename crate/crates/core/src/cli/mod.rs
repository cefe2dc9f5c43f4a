//! Command-line surface: dataset synthesis, training, pseudolabelling,
//! screening, prediction, evaluation and full comparisons.

mod commands;
mod evaluation;
mod store;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_compare, cmd_evaluate, cmd_predict, cmd_pseudolabel, cmd_screen, cmd_synth, cmd_train,
    dataset_digest, load_preset, provenance, run_order, score, CompareReport, PredictionSource,
    ScreenSummary,
};
pub use evaluation::{write_evaluation, EvaluationSummary, MethodRows};
pub use store::{load_trained, save_trained};

use crate::error::{Error, Result};
use crate::screening::{ScreeningConfig, SideCollapse};
use crate::strategies::{Dataset, Strategy};
use crate::synthgen::SynthConfig;
use crate::volume::{Manifest, Split};

#[derive(Debug, Parser)]
#[command(name = "partseg", version, about = "Lesion segmentation from partially labelled volumes")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON generator configuration (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one strategy's ensemble.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        strategy: String,
        /// desk | full | path to a JSON configuration
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Training root; checkpoints go to `<out>/<strategy>/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete missing labels with a marginal-loss teacher.
    Pseudolabel {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the marginal checkpoints.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discard scans whose ISL is not visible on the image.
    Screen {
        #[arg(long)]
        manifest: PathBuf,
        /// isles | soop
        #[arg(long, default_value = "isles")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write probability volumes for a split.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        strategy: String,
        /// Directory holding the strategy's checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions on the test split.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Strategy whose checkpoints are evaluated.
        #[arg(long, requires = "checkpoints")]
        strategy: Option<String>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Directory of `<id>_probs.nii.gz` files instead of checkpoints.
        #[arg(long, conflicts_with = "checkpoints")]
        predictions: Option<PathBuf>,
        /// Method name in the report (defaults to the strategy).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several strategies into one report.
    Compare {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated strategy names (default: all).
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_data(manifest: &Path) -> Result<Dataset> {
    Dataset::load(Manifest::load(manifest)?)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split '{other}'; valid: train | validation | test"))),
    }
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Synth { out, seed, config } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = cmd_synth(&cfg, &out)?;
            println!("wrote {} subjects to {}", m.samples.len(), out.display());
        }
        Command::Train {
            manifest,
            strategy,
            preset,
            seed,
            out,
        } => {
            let strategy: Strategy = strategy.parse()?;
            let cfg = load_preset(&preset, seed)?;
            let t = cmd_train(&load_data(&manifest)?, strategy, &cfg, &out)?;
            for l in &t.logs {
                println!("{strategy} {:?} seed {}: best epoch {} val DSC {:.4}", l.role, l.seed, l.best_epoch, l.val_dsc);
            }
        }
        Command::Pseudolabel { manifest, teacher, out } => {
            let m = cmd_pseudolabel(&load_data(&manifest)?, &teacher, &out)?;
            let n: usize = m.samples.iter().map(|s| s.pseudo_labels.len()).sum();
            println!("composed {n} labels; manifest at {}", out.join("manifest.json").display());
        }
        Command::Screen { manifest, preset, out } => {
            let cfg = ScreeningConfig::preset(&preset)?;
            let s = cmd_screen(&Manifest::load(&manifest)?, &cfg, &SideCollapse::default(), &out)?;
            println!("kept {} records, discarded {}", s.kept, s.discarded);
        }
        Command::Predict {
            manifest,
            strategy,
            checkpoints,
            split,
            out,
        } => {
            let strategy: Strategy = strategy.parse()?;
            let t = load_trained(strategy, &checkpoints)?;
            let files = cmd_predict(&load_data(&manifest)?, &t, parse_split(&split)?, &out)?;
            println!("wrote {} probability volumes to {}", files.len(), out.display());
        }
        Command::Evaluate {
            manifest,
            strategy,
            checkpoints,
            predictions,
            name,
            preset,
            seed,
            out,
        } => {
            let cfg = load_preset(&preset, seed)?;
            let data = load_data(&manifest)?;
            let prov = provenance(&cfg, &manifest, &data.manifest)?;
            let (label, trained) = match (strategy, checkpoints, &predictions) {
                (Some(s), Some(dir), None) => {
                    let s: Strategy = s.parse()?;
                    (s.display_name().to_string(), Some(load_trained(s, &dir)?))
                }
                (None, None, Some(_)) => ("predictions".to_string(), None),
                _ => {
                    return Err(Error::Config(
                        "give either --strategy with --checkpoints, or --predictions".into(),
                    ))
                }
            };
            let source = match (&trained, &predictions) {
                (Some(t), _) => PredictionSource::Trained(t),
                (None, Some(d)) => PredictionSource::Directory(d),
                _ => unreachable!("validated above"),
            };
            let name = name.unwrap_or(label);
            let (_, failures) = cmd_evaluate(&data, &name, &source, &cfg, &prov, &out)?;
            for (id, e) in &failures {
                eprintln!("{id}: {e}");
            }
            println!("wrote evaluation of {name} to {}", out.display());
        }
        Command::Compare {
            manifest,
            strategy,
            preset,
            seed,
            out,
        } => {
            let strategies: Vec<Strategy> = if strategy.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                strategy.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let cfg = load_preset(&preset, seed)?;
            let data = load_data(&manifest)?;
            let prov = provenance(&cfg, &manifest, &data.manifest)?;
            let report = cmd_compare(&data, &strategies, &cfg, &prov, &out)?;
            for (name, a) in &report.summary.aggregates {
                let pct = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{:.1}", x * 100.0));
                println!(
                    "{name:22} AP wmh {:>5} isl {:>5}  DSC wmh {:>5} isl {:>5}",
                    pct(a.ap.wmh),
                    pct(a.ap.isl),
                    pct(a.dsc.wmh),
                    pct(a.dsc.isl)
                );
            }
            if let Some((s, e)) = report.failures.into_iter().next() {
                eprintln!("{s} failed: {e}");
                return Err(e);
            }
        }
    }
    Ok(())
}
