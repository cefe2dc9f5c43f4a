//! Patch-based SGD training with validation-driven checkpoint selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::net::{Architecture, VoxelClassifier};
use super::optim::{poly_lr, sgd_step};
use crate::error::{Error, Result};
use crate::labelspace::{loss_terms, Class, ClassSet, Label, LabelAvailability, LossTerm, Method};
use crate::loss::{combined_loss_sets, LossConfig};
use crate::metrics::dsc;
use crate::rng;
use crate::sampling::{
    augment, extract_patch, sample_centre, AugmentationConfig, LabelIndex, SamplerConfig,
};
use crate::volume::{LabelVolume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lr0: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub lr_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Validate every this many epochs (and after the last one).
    pub val_interval: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub sampler: SamplerConfig,
    pub augmentation: AugmentationConfig,
    pub loss: LossConfig,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be a non-negative number".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "epochs, batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be positive".into()));
        }
        self.sampler.validate()?;
        self.augmentation.validate()?;
        self.loss.validate()
    }
}

/// A training subject: normalised image, labels restricted to what was
/// annotated, and which labels those are.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Volume3D,
    pub labels: LabelVolume,
    pub avail: LabelAvailability,
    index: LabelIndex,
}

impl TrainSample {
    pub fn new(id: impl Into<String>, image: Volume3D, labels: LabelVolume, avail: LabelAvailability) -> Result<Self> {
        image.geom().check_same(labels.geom())?;
        let index = LabelIndex::new(&labels);
        Ok(Self {
            id: id.into(),
            image,
            labels,
            avail,
            index,
        })
    }
}

/// A fully labelled validation subject.
#[derive(Debug, Clone)]
pub struct ValSample {
    pub id: String,
    pub image: Volume3D,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub val_dsc: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: VoxelClassifier,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepTrace>,
}

/// Mean argmax DSC over every (head, foreground channel) pair and subject.
///
/// A channel scores the voxels whose label it covers, so a `NOT_BG` channel
/// is compared with WMH ∪ ISL.
pub fn validation_dsc(model: &VoxelClassifier, val: &[ValSample]) -> Result<Option<f64>> {
    let per: Vec<Vec<f64>> = val
        .par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let mut out = Vec::new();
            for logits in model.predict_logits(&s.image) {
                let arg = logits.argmax();
                for (c, class) in logits.classes().iter().enumerate() {
                    if class.covers(Label::Bg) {
                        continue;
                    }
                    let pred = crate::volume::Grid::new(
                        *s.labels.geom(),
                        arg.iter().map(|&a| a == c).collect(),
                    )?;
                    let gt = s.labels.map(|l| class.covers(l));
                    if let Some(d) = dsc(&pred, &gt)? {
                        out.push(d);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per.into_iter().flatten().collect();
    Ok((!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64))
}

/// Foreground classes a sample's patches are centred on.
fn sampling_classes(terms: &[LossTerm]) -> Result<ClassSet> {
    let mut fg: Vec<Class> = Vec::new();
    for t in terms {
        for c in t.sets.ce.foreground() {
            if !fg.contains(&c) {
                fg.push(c);
            }
        }
    }
    ClassSet::new(fg)
}

struct BatchItem {
    loss: f64,
    ce: f64,
    dice: f64,
    grad: Vec<f64>,
}

fn batch_item(
    model: &VoxelClassifier,
    sample: &TrainSample,
    method: Method,
    cfg: &TrainerConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<BatchItem> {
    let terms = loss_terms(sample.avail, method)?;
    let trained = sampling_classes(&terms)?;
    let centre = sample_centre(
        &sample.index,
        sample.labels.geom(),
        &trained,
        cfg.sampler.p_background,
        rng,
    );
    let (x, y) = extract_patch(&sample.image, &sample.labels, centre, cfg.sampler.patch_size)?;
    let (x, y) = augment(&x, &y, &cfg.augmentation, rng)?;
    let fwd = model.forward(&x);
    let w = 1.0 / terms.len() as f64;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.num_heads()];
    let (mut loss, mut ce, mut dice) = (0.0, 0.0, 0.0);
    for t in &terms {
        let logits = fwd
            .logits()
            .get(t.head)
            .ok_or_else(|| Error::Config(format!("{method:?} needs head {}", t.head)))?;
        let v = combined_loss_sets(logits, &y, &t.sets, &cfg.loss)?.scaled(w);
        loss += v.total;
        ce += v.ce;
        dice += v.dice;
        match &mut grads[t.head] {
            Some(g) => g.iter_mut().zip(&v.grad_logits).for_each(|(a, b)| *a += b),
            slot => *slot = Some(v.grad_logits),
        }
    }
    let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
    Ok(BatchItem {
        loss,
        ce,
        dice,
        grad: model.backward(&fwd, &refs),
    })
}

/// Trains `init` on `data` under `method`, keeping the checkpoint with the
/// highest validation mean DSC (the initial model competes as epoch 0).
pub fn train(
    init: VoxelClassifier,
    data: &[TrainSample],
    val: &[ValSample],
    method: Method,
    cfg: &TrainerConfig,
    config_echo: serde_json::Value,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("no training samples for {method:?}")));
    }
    let mut model = init;
    let mut velocity = vec![0.0; model.params().len()];
    let snapshot = |m: &VoxelClassifier, epoch, val_dsc| Checkpoint {
        model: m.clone(),
        epoch,
        val_dsc,
        temperature: None,
        config: config_echo.clone(),
    };
    let init_dsc = validation_dsc(&model, val)?.unwrap_or(0.0);
    let mut best = snapshot(&model, 0, init_dsc);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);

    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.lr0, epoch, cfg.epochs, cfg.lr_power);
        let (mut el, mut ec, mut ed) = (0.0, 0.0, 0.0);
        for step in 0..cfg.steps_per_epoch {
            let items: Vec<(String, BatchItem)> = (0..cfg.batch_size)
                .into_par_iter()
                .map(|b| {
                    let mut r = rng::stream(
                        cfg.seed,
                        &[rng::tag("batch"), epoch as u64, step as u64, b as u64],
                    );
                    let pick = rand::Rng::random_range(&mut r, 0..data.len());
                    let s = &data[pick];
                    batch_item(&model, s, method, cfg, &mut r).map(|it| (s.id.clone(), it))
                })
                .collect::<Result<_>>()?;
            let n = items.len() as f64;
            let mut grad = vec![0.0; velocity.len()];
            let (mut l, mut c, mut d) = (0.0, 0.0, 0.0);
            for (_, it) in &items {
                grad.iter_mut().zip(&it.grad).for_each(|(a, b)| *a += b / n);
                l += it.loss / n;
                c += it.ce / n;
                d += it.dice / n;
            }
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "{method:?}: non-finite loss or gradient at epoch {epoch}, step {step} (lr {lr})"
                )));
            }
            sgd_step(model.params_mut(), &grad, &mut velocity, lr, cfg.momentum);
            steps.push(StepTrace {
                epoch,
                step,
                loss: l,
                ce: c,
                dice: d,
                samples: items.into_iter().map(|(id, _)| id).collect(),
            });
            el += l;
            ec += c;
            ed += d;
        }
        let done = epoch + 1;
        let val_dsc = if done % cfg.val_interval == 0 || done == cfg.epochs {
            let v = validation_dsc(&model, val)?.unwrap_or(0.0);
            if v > best.val_dsc {
                best = snapshot(&model, done, v);
            }
            Some(v)
        } else {
            None
        };
        let k = cfg.steps_per_epoch as f64;
        epochs.push(EpochLog {
            epoch: done,
            lr,
            loss: el / k,
            ce: ec / k,
            dice: ed / k,
            val_dsc,
            best_epoch: best.epoch,
        });
    }
    Ok(TrainOutcome {
        best,
        last: model,
        epochs,
        steps,
    })
}
