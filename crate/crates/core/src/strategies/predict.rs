//! Ensemble inference with optional per-model temperature.

use super::temperature::apply_temperature;
use crate::error::{Error, Result};
use crate::loss::softmax_probs;
use crate::model::Checkpoint;
use crate::volume::{ProbVolume, Volume3D};

/// Mean of the members' softmax outputs for one head, each computed from
/// logits divided by that member's temperature (1 when uncalibrated).
pub fn ensemble_probs(members: &[Checkpoint], x: &Volume3D, head: usize) -> Result<ProbVolume> {
    let mut acc: Option<ProbVolume> = None;
    for ck in members {
        let mut logits = ck
            .model
            .predict_logits(x)
            .into_iter()
            .nth(head)
            .ok_or_else(|| Error::Config(format!("model has no head {head}")))?;
        if let Some(t) = ck.temperature {
            apply_temperature(&mut logits, t);
        }
        let p = softmax_probs(&logits)?;
        match &mut acc {
            None => acc = Some(p),
            Some(a) => {
                if a.classes() != p.classes() {
                    return Err(Error::Config("ensemble members disagree on output classes".into()));
                }
                a.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    let mut acc = acc.ok_or_else(|| Error::Config("empty ensemble".into()))?;
    let k = members.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}
