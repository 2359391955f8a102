mod common;

use std::collections::BTreeMap;

use common::{indexed_captures, set_from, tiny_encoder};
use rfctl_core::dataio::TransmissionIdAllocator;
use rfctl_core::pipeline::{
    evaluate, evaluate_contrastive_loss, pretrain, run_matrix, train_classifier, LabelSpace, ModelKind,
    Predictor, PretrainConfig, RunSettings, TrainConfig,
};
use rfctl_core::{AugmentConfig, CaptureSet, ExperimentConfig, IqFrame, ModelState, SetId};

/// A desk experiment shrunk to `devices` devices, `frames` frames per
/// capture and the tiny encoder.
fn small(devices: usize, frames: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.devices.num_devices = devices;
    cfg.dataset.window = 200;
    cfg.dataset.frames_per_capture = frames;
    cfg.encoder = tiny_encoder();
    cfg
}

fn settings(cfg: &ExperimentConfig) -> RunSettings {
    RunSettings {
        encoder: cfg.encoder.clone(),
        augment: cfg.augment.clone(),
        pretrain: PretrainConfig { epochs: 1, batch_size: 8, ..cfg.pretrain.clone() },
        train: TrainConfig { epochs: 2, cnn_epochs: 1, batch_size: 8, ..cfg.train.clone() },
    }
}

/// Reads the device back out of an indexed capture sample.
struct IndexOracle {
    labels: LabelSpace,
    map: fn(usize) -> usize,
}

impl Predictor for IndexOracle {
    fn label_space(&self) -> &LabelSpace {
        &self.labels
    }
    fn predict(&self, frames: &[&IqFrame]) -> rfctl_core::Result<Vec<usize>> {
        Ok(frames.iter().map(|f| (self.map)((f.q()[0] / 10.0) as usize)).collect())
    }
}

#[test]
fn confusion_of_a_full_size_set_counts_every_frame() {
    let mut ids = TransmissionIdAllocator::new();
    let set = set_from(&indexed_captures(15, 0, 2500 * 1000), 0, 0, 2500, 1000, &mut ids);
    let oracle = IndexOracle { labels: LabelSpace { devices: (0..15).collect() }, map: |d| d };
    let r = evaluate(&oracle, &set, ModelKind::Cnn, 0, SetId::new(1, 0)).unwrap();
    assert_eq!(r.total(), 37_500);
    assert_eq!(r.accuracy, 1.0);
    for (i, row) in r.confusion.iter().enumerate() {
        assert_eq!(row[i], 2500);
    }
}

#[test]
fn relabeling_permutes_the_confusion_matrix() {
    let mut ids = TransmissionIdAllocator::new();
    let set = set_from(&indexed_captures(3, 0, 4 * 10), 0, 0, 4, 10, &mut ids);
    let labels = LabelSpace { devices: vec![0, 1, 2] };
    // Device 2 is always mistaken for device 0.
    let a = IndexOracle { labels: labels.clone(), map: |d| if d == 2 { 0 } else { d } };
    let ra = evaluate(&a, &set, ModelKind::Cnn, 0, SetId::new(1, 0)).unwrap();

    let mut swapped = set.clone();
    for c in &mut swapped.captures {
        c.device_id = [1, 0, 2][c.device_id];
    }
    // Same predictor seen through the relabeling 0 <-> 1.
    let b = IndexOracle { labels, map: |d| [1, 0, 1][d] };
    let rb = evaluate(&b, &swapped, ModelKind::Cnn, 0, SetId::new(1, 0)).unwrap();
    assert_eq!(ra.accuracy, rb.accuracy);
    let p = [1, 0, 2];
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(ra.confusion[i][j], rb.confusion[p[i]][p[j]]);
        }
    }
}

#[test]
fn one_epoch_lowers_held_out_loss_on_average() {
    let cfg = small(2, 8);
    let sets = cfg.build_sets(&cfg.synthesize().unwrap()).unwrap();
    let train = sets[&SetId::new(0, 0)].unlabeled_frames();
    let held_out = sets[&SetId::new(0, 1)].unlabeled_frames();
    let aug = AugmentConfig::default();
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..3 {
        let pre = PretrainConfig { epochs: 1, batch_size: 4, seed, ..PretrainConfig::default() };
        let init = pretrain(&train, &[], &cfg.encoder, &aug, &PretrainConfig { epochs: 0, ..pre.clone() }).unwrap();
        before += evaluate_contrastive_loss(&init.state, &held_out, &aug, pre.tau, 99).unwrap();
        let p = pretrain(&train, &[], &cfg.encoder, &aug, &pre).unwrap();
        after += evaluate_contrastive_loss(&p.state, &held_out, &aug, pre.tau, 99).unwrap();
    }
    assert!(after < before, "held-out loss {before} -> {after}");
}

#[test]
fn frozen_random_encoder_beats_chance_on_two_separable_devices() {
    let cfg = small(2, 32);
    let sets = cfg.build_sets(&cfg.synthesize().unwrap()).unwrap();
    let src = &sets[&SetId::new(0, 0)];
    let state = ModelState::new(&cfg.encoder, 0.99, 0).unwrap();
    let run = train_classifier(&state, &src.labeled_frames(), &TrainConfig { epochs: 30, ..TrainConfig::default() }).unwrap();
    assert_eq!(run.classifier.num_classes, 2);
    let r = evaluate(&run, src, ModelKind::Ctl, 0, src.id()).unwrap();
    assert!(r.accuracy >= 0.5, "training accuracy {}", r.accuracy);
}

fn tiny_sets() -> (ExperimentConfig, BTreeMap<SetId, CaptureSet>) {
    let cfg = small(3, 6);
    let sets = cfg.build_sets(&cfg.synthesize().unwrap()).unwrap();
    (cfg, sets)
}

#[test]
fn full_day_pair_grid_has_24_cells_per_seed() {
    let (cfg, sets) = tiny_sets();
    let mut pairs = Vec::new();
    for (a, b) in [(0, 1), (1, 0)] {
        for s in 0..2 {
            for t in 0..2 {
                pairs.push((SetId::new(a, s), SetId::new(b, t)));
            }
        }
    }
    let r = run_matrix(&sets, &pairs, &ModelKind::ALL, &[0], &settings(&cfg)).unwrap();
    assert_eq!(r.len(), 24);
    let mut i = 0;
    for (s, t) in &pairs {
        for m in ModelKind::ALL {
            assert_eq!((r[i].source, r[i].target, r[i].model), (*s, *t, m));
            i += 1;
        }
    }
}

#[test]
fn empty_grid_and_repeated_cells() {
    let (cfg, sets) = tiny_sets();
    assert!(run_matrix(&sets, &[], &ModelKind::ALL, &[0], &settings(&cfg)).unwrap().is_empty());
    let p = (SetId::new(0, 0), SetId::new(1, 0));
    let r = run_matrix(&sets, &[p, p], &[ModelKind::Ctl], &[4], &settings(&cfg)).unwrap();
    assert_eq!(r[0], r[1]);
    let same_day = (SetId::new(0, 0), SetId::new(0, 1));
    assert!(run_matrix(&sets, &[same_day], &[ModelKind::Cnn], &[0], &settings(&cfg)).is_err());
}

#[test]
fn empty_target_reproduces_source_only_bitwise() {
    let (cfg, sets) = tiny_sets();
    let src = sets[&SetId::new(0, 0)].unlabeled_frames();
    let s = settings(&cfg);
    let ab = pretrain(&src, &[], &cfg.encoder, &cfg.augment, &s.pretrain.for_kind(ModelKind::Ab)).unwrap();
    let ctl = pretrain(&src, &[], &cfg.encoder, &cfg.augment, &s.pretrain.for_kind(ModelKind::Ctl)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ab.state.save(&dir.path().join("ab")).unwrap();
    ctl.state.save(&dir.path().join("ctl")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("ab")).unwrap(), std::fs::read(dir.path().join("ctl")).unwrap());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ab.epoch_losses), bits(&ctl.epoch_losses));
}
