//! On-disk layout of trained strategies: one checkpoint per role and seed,
//! plus JSON-lines training logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::strategies::{Role, Strategy, TrainedMember, TrainedStrategy};

const ROLES: [(Role, &str); 4] = [
    (Role::Main, "main"),
    (Role::Wmh, "wmh"),
    (Role::Isl, "isl"),
    (Role::Stage1, "stage1"),
];

fn role_name(r: Role) -> &'static str {
    ROLES.iter().find(|(k, _)| *k == r).map(|(_, n)| *n).expect("every role is named")
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `<dir>/<role>_<k>.ckpt`, `train_log.jsonl` (one line per epoch
/// and one summary line per run) and `steps.jsonl`.
pub fn save_trained(t: &TrainedStrategy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in &t.members {
        for (k, ck) in m.checkpoints.iter().enumerate() {
            ck.save(dir.join(format!("{}_{k}.ckpt", role_name(m.role))))?;
        }
    }
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for l in &t.logs {
        let role = role_name(l.role);
        for e in &l.epochs {
            epochs.push(json!({
                "kind": "epoch", "strategy": t.strategy.name(), "role": role, "seed": l.seed,
                "epoch": e.epoch, "lr": e.lr, "loss": e.loss, "ce": e.ce, "dice": e.dice,
                "val_dsc": e.val_dsc, "best_epoch": e.best_epoch,
            }));
        }
        epochs.push(json!({
            "kind": "run", "strategy": t.strategy.name(), "role": role, "seed": l.seed,
            "best_epoch": l.best_epoch, "val_dsc": l.val_dsc,
            "trunk_digests": l.trunk_digests, "temperature": l.temperature,
        }));
        for s in &l.steps {
            steps.push(json!({
                "role": role, "seed": l.seed, "epoch": s.epoch, "step": s.step,
                "loss": s.loss, "ce": s.ce, "dice": s.dice, "samples": s.samples,
            }));
        }
    }
    write_lines(&dir.join("train_log.jsonl"), &epochs)?;
    write_lines(&dir.join("steps.jsonl"), &steps)
}

/// Loads the checkpoints written by [`save_trained`]. Logs are not restored.
pub fn load_trained(strategy: Strategy, dir: &Path) -> Result<TrainedStrategy> {
    let mut members = Vec::new();
    for (role, name) in ROLES {
        let mut cks: Vec<Checkpoint> = Vec::new();
        while let Ok(true) = dir.join(format!("{name}_{}.ckpt", cks.len())).try_exists() {
            cks.push(Checkpoint::load(dir.join(format!("{name}_{}.ckpt", cks.len())))?);
        }
        if !cks.is_empty() {
            members.push(TrainedMember { role, checkpoints: cks });
        }
    }
    if members.is_empty() {
        return Err(Error::Config(format!(
            "no {} checkpoints in {}",
            strategy.name(),
            dir.display()
        )));
    }
    Ok(TrainedStrategy {
        strategy,
        members,
        logs: vec![],
    })
}
