//! Two-stage training: foreground vs background on all partial labels, then
//! a fresh three-class head fine-tuned on the fully labelled subset.

use super::data::{Dataset, Subset};
use crate::error::{Error, Result};
use crate::labelspace::{Class, Method};
use crate::model::{train, Checkpoint, TrainOutcome, TrainerConfig, VoxelClassifier};
use crate::rng;

pub const STAGE1_HEAD: [Class; 2] = [Class::Bg, Class::NotBg];
pub const STAGE2_HEAD: [Class; 3] = [Class::Bg, Class::Wmh, Class::Isl];

#[derive(Debug, Clone)]
pub struct PhasedOutcome {
    pub stage1: TrainOutcome,
    /// `None` when stage 2 has zero epochs.
    pub stage2: Option<TrainOutcome>,
    /// Stage-1 model carrying the fresh three-class head.
    pub handover: VoxelClassifier,
    pub trunk_digest_before: String,
    pub trunk_digest_after: String,
    pub model: Checkpoint,
}

/// Seed of the replacement head.
pub fn phase2_seed(seed: u64) -> u64 {
    rng::derive(seed, &[rng::tag("phase2")])
}

/// Replaces the head of a stage-1 model, returning the new model and the
/// trunk digests before and after.
pub fn replace_head(stage1: &VoxelClassifier, seed: u64) -> Result<(VoxelClassifier, String, String)> {
    let before = stage1.trunk_digest();
    let m = stage1.with_new_heads(&[STAGE2_HEAD.to_vec()], phase2_seed(seed))?;
    let after = m.trunk_digest();
    if before != after {
        return Err(Error::Numerical("head replacement altered the trunk".into()));
    }
    Ok((m, before, after))
}

/// Stage 1 runs `cfg.epochs` epochs, stage 2 `stage2_epochs`.
pub fn run_phased(data: &Dataset, cfg: &TrainerConfig, stage2_epochs: usize, echo: serde_json::Value) -> Result<PhasedOutcome> {
    let val = data.validation();
    let stage1_data = data.train_samples(Subset::PlsAll)?;
    let fls = data.train_samples(Subset::Fls)?;
    let init = VoxelClassifier::new(&cfg.architecture, &[STAGE1_HEAD.to_vec()], cfg.seed)?;
    let stage1 = train(init, &stage1_data, &val, Method::PhasedStage1, cfg, echo.clone())?;
    let (handover, before, after) = replace_head(&stage1.best.model, cfg.seed)?;
    let (stage2, model) = if stage2_epochs == 0 {
        let ck = Checkpoint {
            model: handover.clone(),
            epoch: 0,
            val_dsc: crate::model::validation_dsc(&handover, &val)?.unwrap_or(0.0),
            temperature: None,
            config: echo,
        };
        (None, ck)
    } else {
        let cfg2 = TrainerConfig {
            epochs: stage2_epochs,
            seed: phase2_seed(cfg.seed),
            ..cfg.clone()
        };
        let out = train(handover.clone(), &fls, &val, Method::PhasedStage2, &cfg2, echo)?;
        let best = out.best.clone();
        (Some(out), best)
    };
    Ok(PhasedOutcome {
        stage1,
        stage2,
        handover,
        trunk_digest_before: before,
        trunk_digest_after: after,
        model,
    })
}
