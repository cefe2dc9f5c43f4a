//! The supervision strategies compared by this crate, and their shared
//! machinery: data loading, binary fusion, temperature scaling, pseudolabel
//! completion and the phased schedule.

mod data;
mod fusion;
mod phased;
mod predict;
mod pseudolabel;
mod temperature;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{Dataset, Subject, Subset};
pub use fusion::fuse_binary_predictions;
pub use phased::{phase2_seed, replace_head, run_phased, PhasedOutcome, STAGE1_HEAD, STAGE2_HEAD};
pub use predict::ensemble_probs;
pub use pseudolabel::generate_pseudolabels;
pub use temperature::{apply_temperature, temperature_scale, CalibrationSet, TemperatureConfig, TemperatureFit};

use crate::error::{Error, Result};
use crate::labelspace::{Class, Method};
use crate::loss::LossConfig;
use crate::metrics::{evaluate_subject, EvalConfig, MetricRow};
use crate::model::{
    train, Architecture, Checkpoint, EpochLog, StepTrace, TrainerConfig, VoxelClassifier,
};
use crate::rng;
use crate::sampling::{AugmentationConfig, SamplerConfig};
use crate::volume::{ProbVolume, Split, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Multiclass,
    MultiModel,
    MultiModelTs,
    ClassConditional,
    Pseudolabels,
    Phased,
    ClassAdaptive,
    Marginal,
}

impl Strategy {
    /// Report order.
    pub const ALL: [Strategy; 8] = [
        Strategy::Multiclass,
        Strategy::MultiModel,
        Strategy::MultiModelTs,
        Strategy::ClassConditional,
        Strategy::Pseudolabels,
        Strategy::Phased,
        Strategy::ClassAdaptive,
        Strategy::Marginal,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Multiclass => "multiclass",
            Strategy::MultiModel => "multimodel",
            Strategy::MultiModelTs => "multimodel-ts",
            Strategy::ClassConditional => "classcond",
            Strategy::Pseudolabels => "pseudolabels",
            Strategy::Phased => "phased",
            Strategy::ClassAdaptive => "classadaptive",
            Strategy::Marginal => "marginal",
        }
    }

    /// Row label in comparison reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Multiclass => "multiclass",
            Strategy::MultiModel => "multi-model",
            Strategy::MultiModelTs => "multi-model (TS)",
            Strategy::ClassConditional => "class-conditional",
            Strategy::Pseudolabels => "pseudolabels",
            Strategy::Phased => "phased",
            Strategy::ClassAdaptive => "class-adaptive loss",
            Strategy::Marginal => "marginal loss",
        }
    }

    pub fn spec(self) -> StrategySpec {
        let full = vec![Class::Bg, Class::Wmh, Class::Isl];
        let wmh = vec![Class::Bg, Class::Wmh];
        let isl = vec![Class::Bg, Class::Isl];
        let single = |subset, method| vec![Member {
            role: Role::Main,
            subset,
            method,
            heads: vec![full.clone()],
        }];
        let members = match self {
            Strategy::Multiclass => single(Subset::Fls, Method::Multiclass),
            Strategy::MultiModel | Strategy::MultiModelTs => vec![
                Member {
                    role: Role::Wmh,
                    subset: Subset::PlsWmh,
                    method: Method::BinaryWmh,
                    heads: vec![wmh],
                },
                Member {
                    role: Role::Isl,
                    subset: Subset::PlsIsl,
                    method: Method::BinaryIsl,
                    heads: vec![isl],
                },
            ],
            Strategy::ClassConditional => vec![Member {
                role: Role::Main,
                subset: Subset::PlsAll,
                method: Method::ClassConditional,
                heads: vec![wmh, isl],
            }],
            Strategy::Pseudolabels => single(Subset::PlsPseudo, Method::Pseudolabels),
            Strategy::Phased => vec![
                Member {
                    role: Role::Stage1,
                    subset: Subset::PlsAll,
                    method: Method::PhasedStage1,
                    heads: vec![STAGE1_HEAD.to_vec()],
                },
                Member {
                    role: Role::Main,
                    subset: Subset::Fls,
                    method: Method::PhasedStage2,
                    heads: vec![full.clone()],
                },
            ],
            Strategy::ClassAdaptive => single(Subset::PlsAll, Method::ClassAdaptive),
            Strategy::Marginal => single(Subset::PlsAll, Method::Marginal),
        };
        StrategySpec {
            strategy: self,
            members,
            calibrated: self == Strategy::MultiModelTs,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Strategy::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown strategy '{s}'; valid: {}", valid.join(" | ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Main,
    Wmh,
    Isl,
    /// First phase of the phased schedule; not used at inference.
    Stage1,
}

/// One independently trained model family within a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub role: Role,
    pub subset: Subset,
    pub method: Method,
    pub heads: Vec<Vec<Class>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub members: Vec<Member>,
    /// Whether models are temperature-calibrated after training.
    pub calibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub preset: String,
    pub trainer: TrainerConfig,
    /// Number of seeds per ensemble.
    pub ensemble_size: usize,
    pub temperature: TemperatureConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub ddsc_theta_mm: f64,
}

impl EvalSettings {
    pub fn to_config(self) -> EvalConfig {
        EvalConfig {
            ddsc: crate::metrics::DdscConfig {
                theta: self.ddsc_theta_mm,
            },
        }
    }
}

impl StrategyConfig {
    /// Small enough to compare all strategies on the default synthetic
    /// dataset on one CPU core.
    pub fn desk(seed: u64) -> Self {
        Self {
            preset: "desk".into(),
            trainer: TrainerConfig {
                lr0: 0.01,
                momentum: 0.9,
                lr_power: 0.9,
                epochs: 50,
                batch_size: 2,
                steps_per_epoch: 10,
                val_interval: 5,
                seed,
                architecture: Architecture::default(),
                sampler: SamplerConfig {
                    patch_size: [16; 3],
                    p_background: 0.3,
                },
                augmentation: AugmentationConfig::default(),
                loss: LossConfig::default(),
            },
            ensemble_size: 3,
            temperature: TemperatureConfig::default(),
            eval: EvalSettings { ddsc_theta_mm: 2.0 },
        }
    }

    /// Published hyperparameters. Recorded for reference; not desk-runnable.
    pub fn full(seed: u64) -> Self {
        Self {
            preset: "full".into(),
            trainer: TrainerConfig {
                lr0: 0.01,
                momentum: 0.99,
                lr_power: 0.9,
                epochs: 2000,
                batch_size: 6,
                steps_per_epoch: 250,
                val_interval: 50,
                seed,
                architecture: Architecture::default(),
                sampler: SamplerConfig {
                    patch_size: [160; 3],
                    p_background: 0.3,
                },
                augmentation: AugmentationConfig::default(),
                loss: LossConfig::default(),
            },
            ensemble_size: 3,
            temperature: TemperatureConfig::default(),
            eval: EvalSettings { ddsc_theta_mm: 2.0 },
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "full" => Ok(Self::full(seed)),
            other => Err(Error::Config(format!("unknown preset '{other}'; valid: desk | full | <file.json>"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be positive".into()));
        }
        if self.eval.ddsc_theta_mm < 0.0 {
            return Err(Error::Config("ddsc theta must be non-negative".into()));
        }
        self.trainer.validate()
    }

    /// Trainer seed of ensemble member `k`.
    pub fn member_seed(&self, k: usize) -> u64 {
        rng::derive(self.trainer.seed, &[rng::tag("ensemble"), k as u64])
    }

    /// Stage-2 epochs of the phased schedule: half of stage 1.
    pub fn phased_stage2_epochs(&self) -> usize {
        self.trainer.epochs / 2
    }
}

/// What one training run produced, beyond its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub role: Role,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_dsc: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunk_digests: Option<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<TemperatureFit>,
}

#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub role: Role,
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainedStrategy {
    pub strategy: Strategy,
    pub members: Vec<TrainedMember>,
    pub logs: Vec<RunLog>,
}

impl TrainedStrategy {
    pub fn member(&self, role: Role) -> Result<&TrainedMember> {
        self.members
            .iter()
            .find(|m| m.role == role)
            .ok_or_else(|| Error::Config(format!("{}: no {role:?} models", self.strategy)))
    }

    /// Ensemble prediction over `[BG, WMH, ISL]`.
    pub fn predict(&self, x: &Volume3D) -> Result<ProbVolume> {
        match self.strategy {
            Strategy::MultiModel | Strategy::MultiModelTs => fuse_binary_predictions(
                &ensemble_probs(&self.member(Role::Wmh)?.checkpoints, x, 0)?,
                &ensemble_probs(&self.member(Role::Isl)?.checkpoints, x, 0)?,
            ),
            Strategy::ClassConditional => {
                let m = &self.member(Role::Main)?.checkpoints;
                fuse_binary_predictions(&ensemble_probs(m, x, 0)?, &ensemble_probs(m, x, 1)?)
            }
            _ => ensemble_probs(&self.member(Role::Main)?.checkpoints, x, 0),
        }
    }

    /// Scores every test subject.
    pub fn evaluate(&self, data: &Dataset, cfg: &EvalConfig) -> Result<Vec<MetricRow>> {
        let test: Vec<_> = data.split(Split::Test).collect();
        test.par_iter()
            .map(|s| {
                let p = self.predict(&s.image)?;
                evaluate_subject(&s.id, s.cohort.as_deref(), &p, &s.labels, &s.brain, cfg)
            })
            .collect()
    }
}

fn run_log(role: Role, seed: u64, best: &Checkpoint, epochs: Vec<EpochLog>, steps: Vec<StepTrace>) -> RunLog {
    RunLog {
        role,
        seed,
        best_epoch: best.epoch,
        val_dsc: best.val_dsc,
        epochs,
        steps,
        trunk_digests: None,
        temperature: None,
    }
}

/// Trains one strategy's ensemble(s). Pseudolabels expect `data` to be the
/// completed dataset produced by [`generate_pseudolabels`].
pub fn run_strategy(strategy: Strategy, data: &Dataset, cfg: &StrategyConfig) -> Result<TrainedStrategy> {
    cfg.validate()?;
    let spec = strategy.spec();
    let echo = serde_json::json!({ "strategy": strategy.name(), "config": cfg });
    let seeds: Vec<u64> = (0..cfg.ensemble_size).map(|k| cfg.member_seed(k)).collect();
    let mut members = Vec::new();
    let mut logs = Vec::new();

    if strategy == Strategy::Phased {
        let runs: Vec<PhasedOutcome> = seeds
            .par_iter()
            .map(|&seed| {
                let tc = TrainerConfig { seed, ..cfg.trainer.clone() };
                run_phased(data, &tc, cfg.phased_stage2_epochs(), echo.clone())
            })
            .collect::<Result<_>>()?;
        let mut stage1 = Vec::new();
        let mut main = Vec::new();
        for (run, &seed) in runs.into_iter().zip(&seeds) {
            let mut l1 = run_log(Role::Stage1, seed, &run.stage1.best, run.stage1.epochs, run.stage1.steps);
            l1.trunk_digests = Some((run.trunk_digest_before, run.trunk_digest_after));
            logs.push(l1);
            if let Some(s2) = run.stage2 {
                logs.push(run_log(Role::Main, phase2_seed(seed), &run.model, s2.epochs, s2.steps));
            }
            stage1.push(run.stage1.best);
            main.push(run.model);
        }
        members.push(TrainedMember { role: Role::Stage1, checkpoints: stage1 });
        members.push(TrainedMember { role: Role::Main, checkpoints: main });
    } else {
        let val = data.validation();
        for m in &spec.members {
            let samples = data.train_samples(m.subset)?;
            let runs: Vec<_> = seeds
                .par_iter()
                .map(|&seed| {
                    let tc = TrainerConfig { seed, ..cfg.trainer.clone() };
                    let init = VoxelClassifier::new(&tc.architecture, &m.heads, seed)?;
                    train(init, &samples, &val, m.method, &tc, echo.clone())
                })
                .collect::<Result<_>>()?;
            let mut cks = Vec::new();
            for (run, &seed) in runs.into_iter().zip(&seeds) {
                logs.push(run_log(m.role, seed, &run.best, run.epochs, run.steps));
                cks.push(run.best);
            }
            members.push(TrainedMember { role: m.role, checkpoints: cks });
        }
    }
    let trained = TrainedStrategy { strategy, members, logs };
    if spec.calibrated {
        calibrate(trained, data, &cfg.temperature)
    } else {
        Ok(trained)
    }
}

/// Temperature-scales every model of a multi-model ensemble on the
/// validation split and relabels it as the calibrated variant.
pub fn calibrate(mut trained: TrainedStrategy, data: &Dataset, cfg: &TemperatureConfig) -> Result<TrainedStrategy> {
    if !matches!(trained.strategy, Strategy::MultiModel | Strategy::MultiModelTs) {
        return Err(Error::Config(format!("{} models are not temperature-scaled", trained.strategy)));
    }
    let val: Vec<_> = data.split(Split::Validation).collect();
    if val.is_empty() {
        return Err(Error::Data("temperature scaling needs a validation split".into()));
    }
    let labels: Vec<_> = val.iter().map(|s| s.labels.clone()).collect();
    for member in &mut trained.members {
        for (k, ck) in member.checkpoints.iter_mut().enumerate() {
            let logits: Vec<_> = val
                .par_iter()
                .map(|s| ck.model.predict_logits(&s.image).swap_remove(0))
                .collect();
            let set = CalibrationSet::new(&logits, &labels)?;
            let fit = temperature_scale(&set, cfg)?;
            ck.temperature = Some(fit.temperature);
            if let Some(log) = trained
                .logs
                .iter_mut()
                .filter(|l| l.role == member.role)
                .nth(k)
            {
                log.temperature = Some(fit);
            }
        }
    }
    trained.strategy = Strategy::MultiModelTs;
    Ok(trained)
}
