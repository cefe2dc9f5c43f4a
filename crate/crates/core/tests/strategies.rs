//! Strategy plumbing: fusion, temperature scaling, phased head replacement,
//! pseudolabel composition and the comparison driver.

mod common;

use common::{calibrated_logits, oracle_ce, oracle_fuse, oracle_temperature, random_pair};
use partseg::cli::{cmd_compare, cmd_train, load_trained, provenance, run_order};
use partseg::labelspace::{Class, Label};
use partseg::model::{Architecture, VoxelClassifier};
use partseg::strategies::{
    fuse_binary_predictions, generate_pseudolabels, replace_head, temperature_scale, CalibrationSet, Dataset,
    Strategy, StrategyConfig, Subset, TemperatureConfig, STAGE1_HEAD, STAGE2_HEAD,
};
use partseg::synthgen::{generate, SynthConfig};
use partseg::volume::{Geometry, ProbVolume, Split};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data(dir: &std::path::Path, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        n_train: 8,
        n_val: 2,
        n_test: 3,
        seed,
        ..SynthConfig::default()
    };
    Dataset::load(generate(&cfg, dir).unwrap()).unwrap()
}

fn tiny_config(seed: u64) -> StrategyConfig {
    let mut c = StrategyConfig::desk(seed);
    c.trainer.epochs = 2;
    c.trainer.steps_per_epoch = 2;
    c.trainer.val_interval = 1;
    c.trainer.sampler.patch_size = [12; 3];
    c.ensemble_size = 2;
    c
}

#[test]
fn fusion_matches_hand_rule_on_random_voxels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Geometry::isotropic([10, 10, 10]).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..g.len() {
        a.extend(random_pair(&mut rng));
        b.extend(random_pair(&mut rng));
    }
    let wmh = ProbVolume::new(g, vec![Class::Bg, Class::Wmh], a.clone()).unwrap();
    let isl = ProbVolume::new(g, vec![Class::Bg, Class::Isl], b.clone()).unwrap();
    let f = fuse_binary_predictions(&wmh, &isl).unwrap();
    assert_eq!(f.classes(), [Class::Bg, Class::Wmh, Class::Isl]);
    for i in 0..g.len() {
        let want = oracle_fuse([a[2 * i], a[2 * i + 1]], [b[2 * i], b[2 * i + 1]]);
        let got = f.voxel(i);
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn temperature_recovers_doubled_logits() {
    let (z, y) = calibrated_logits(21, 10_000, 3, 3.0);
    let doubled: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
    let set = CalibrationSet::from_raw(3, doubled.clone(), y.clone()).unwrap();
    let fit = temperature_scale(&set, &TemperatureConfig::default()).unwrap();
    assert!(fit.accepted);
    assert!((fit.temperature - 2.0).abs() / 2.0 < 0.05, "T = {}", fit.temperature);
    let oracle = oracle_temperature(&doubled, &y, 3, -3.0, 3.0);
    assert!((fit.temperature - oracle).abs() / oracle < 1e-4, "{} vs {oracle}", fit.temperature);
    assert!((fit.ce_final - oracle_ce(&doubled, &y, 3, fit.temperature)).abs() < 1e-9);
}

#[test]
fn temperature_of_calibrated_logits_is_near_one() {
    let (z, y) = calibrated_logits(22, 10_000, 3, 2.0);
    let set = CalibrationSet::from_raw(3, z, y).unwrap();
    let fit = temperature_scale(&set, &TemperatureConfig::default()).unwrap();
    assert!((fit.temperature - 1.0).abs() < 0.05, "T = {}", fit.temperature);
}

#[test]
fn temperature_respects_iteration_cap_and_bounds() {
    let (z, y) = calibrated_logits(23, 2_000, 2, 3.0);
    let doubled: Vec<f64> = z.iter().map(|v| 5.0 * v).collect();
    let set = CalibrationSet::from_raw(2, doubled, y.clone()).unwrap();
    let cfg = TemperatureConfig {
        max_iterations: 1,
        ..TemperatureConfig::default()
    };
    let fit = temperature_scale(&set, &cfg).unwrap();
    assert_eq!(fit.iterations, 1);
    assert!(fit.ce_final <= fit.ce_initial);

    // Logits anti-correlated with the targets: the CE keeps falling as T grows.
    let flipped: Vec<usize> = y.iter().map(|t| 1 - t).collect();
    let set = CalibrationSet::from_raw(2, z.iter().map(|v| 5.0 * v).collect(), flipped).unwrap();
    let fit = temperature_scale(&set, &TemperatureConfig::default()).unwrap();
    let cap = TemperatureConfig::default().max_temperature;
    assert!(fit.temperature.is_finite() && fit.temperature <= cap * (1.0 + 1e-12));
    assert!(fit.iterations < 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn temperature_never_increases_ce(
        logits in prop::collection::vec(-6.0f64..6.0, 60 * 3),
        targets in prop::collection::vec(0usize..3, 60),
    ) {
        let set = CalibrationSet::from_raw(3, logits.clone(), targets.clone()).unwrap();
        let fit = temperature_scale(&set, &TemperatureConfig::default()).unwrap();
        prop_assert!(fit.ce_final <= fit.ce_initial + 1e-15);
        prop_assert!((fit.ce_initial - oracle_ce(&logits, &targets, 3, 1.0)).abs() < 1e-12);
        prop_assert!((fit.ce_final - oracle_ce(&logits, &targets, 3, fit.temperature)).abs() < 1e-9);
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    let err = "unet".parse::<Strategy>().unwrap_err().to_string();
    assert!(err.contains("multimodel-ts") && err.contains("classadaptive"), "{err}");
}

#[test]
fn run_order_puts_teacher_first() {
    let all = run_order(&Strategy::ALL).unwrap();
    assert_eq!(all[0], Strategy::Multiclass);
    let m = all.iter().position(|s| *s == Strategy::Marginal).unwrap();
    assert_eq!(all[m + 1], Strategy::Pseudolabels);
    assert_eq!(all.len(), 8);
    assert!(run_order(&[Strategy::Pseudolabels]).is_err());
}

#[test]
fn head_replacement_preserves_trunk() {
    let stage1 = VoxelClassifier::new(&Architecture::default(), &[STAGE1_HEAD.to_vec()], 5).unwrap();
    let (m, before, after) = replace_head(&stage1, 5).unwrap();
    assert_eq!(before, after);
    assert_eq!(m.head_classes()[0], STAGE2_HEAD);
    assert_eq!(m.trunk_digest(), stage1.trunk_digest());
}

#[test]
fn pseudolabels_keep_annotated_classes() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("data"), 3);
    let cfg = tiny_config(1);
    let teacher = cmd_train(&data, Strategy::Marginal, &cfg, &dir.path().join("train")).unwrap();
    let ckpts = &teacher.member(partseg::strategies::Role::Main).unwrap().checkpoints;
    let m = generate_pseudolabels(ckpts, &data, dir.path().join("pseudo")).unwrap();
    let completed = Dataset::load(m).unwrap();
    let pls = completed.subset(Subset::PlsPseudo).unwrap();
    assert_eq!(pls.len(), data.subset(Subset::PlsAll).unwrap().len());
    for s in pls {
        let orig = data.get(&s.id).unwrap();
        for (label, has) in [(Label::Wmh, orig.avail.has_wmh), (Label::Isl, orig.avail.has_isl)] {
            if has {
                assert_eq!(s.labels.mask_of(label), orig.labels.mask_of(label), "{}", s.id);
            }
        }
    }
}

#[test]
fn saved_checkpoints_reload_to_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("data"), 4);
    let cfg = tiny_config(2);
    let t = cmd_train(&data, Strategy::ClassConditional, &cfg, &dir.path().join("train")).unwrap();
    let back = load_trained(Strategy::ClassConditional, &dir.path().join("train/classcond")).unwrap();
    let x = &data.split(Split::Test).next().unwrap().image;
    assert_eq!(t.predict(x).unwrap().data(), back.predict(x).unwrap().data());
}

#[test]
fn compare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("data/manifest.json");
    let data = tiny_data(&dir.path().join("data"), 5);
    let cfg = tiny_config(3);
    let prov = provenance(&cfg, &manifest_path, &data.manifest).unwrap();
    let strategies = [Strategy::Multiclass, Strategy::MultiModel, Strategy::MultiModelTs];
    let run = |name: &str| {
        let out = dir.path().join(name);
        let r = cmd_compare(&data, &strategies, &cfg, &prov, &out).unwrap();
        assert!(r.failures.is_empty());
        std::fs::read(out.join("aggregate.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
