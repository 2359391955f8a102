//! Pre-training, classifier training and evaluation, plus the supervised
//! CNN baseline and the grid runner.
//!
//! Every run is single-threaded and deterministic in its seed. Independent
//! grid cells are spread over a rayon pool; their results are collected in
//! job order, so the output does not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{make_pair, AugmentConfig};
use crate::dataio::{CaptureSet, IqFrame, LabeledFrame, SetId, UnlabeledFrame};
use crate::encoder::{frames_to_tensor, Backbone, ClassifierHead, EncoderConfig, ModelState};
use crate::error::{Error, Result};
use crate::loss::{symmetrized_loss, symmetrized_loss_with_grad, DEFAULT_TAU};
use crate::nn::{cosine_lr, softmax_cross_entropy, AdamW, Module, Tensor};
use crate::rng::{derive_seed, rng_from};

const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5ff1e;
const STREAM_AUG: u64 = 0xa06;
const STREAM_CLASSIFIER: u64 = 0xc1f;
const STREAM_CNN: u64 = 0xc22;

/// Frames per inference batch.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Cnn,
    Ab,
    Ctl,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Ab, ModelKind::Ctl];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "CNN",
            ModelKind::Ab => "AB",
            ModelKind::Ctl => "CTL",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CNN" => Ok(ModelKind::Cnn),
            "AB" => Ok(ModelKind::Ab),
            "CTL" => Ok(ModelKind::Ctl),
            _ => Err(Error::invalid(format!("unknown model {s:?}; expected CNN, AB or CTL"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainsUsed {
    SourceOnly,
    SourceAndTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum_coeff: f32,
    pub tau: f64,
    pub seed: u64,
    pub domains_used: DomainsUsed,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 256,
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            momentum_coeff: 0.99,
            tau: DEFAULT_TAU,
            seed: 0,
            domains_used: DomainsUsed::SourceAndTarget,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "pre-training batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.tau > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("tau and learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum_coeff) {
            return Err(Error::invalid("momentum_coeff must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn for_kind(&self, kind: ModelKind) -> PretrainConfig {
        let mut cfg = self.clone();
        cfg.domains_used = match kind {
            ModelKind::Ab => DomainsUsed::SourceOnly,
            _ => DomainsUsed::SourceAndTarget,
        };
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Classifier epochs on frozen features.
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub seed: u64,
    pub hidden: (usize, usize),
    /// Also update the base encoder while training the classifier.
    pub fine_tune: bool,
    pub cnn_epochs: usize,
    pub cnn_learning_rate: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 64,
            weight_decay: 1e-4,
            seed: 0,
            hidden: (256, 128),
            fine_tune: false,
            cnn_epochs: 40,
            cnn_learning_rate: 3e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.cnn_learning_rate > 0.0) {
            return Err(Error::invalid("training batch size and learning rates must be positive"));
        }
        Ok(())
    }
}

/// Maps device ids seen in the source domain to class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub devices: Vec<usize>,
}

impl LabelSpace {
    pub fn from_frames(frames: &[LabeledFrame]) -> Result<Self> {
        let devices: BTreeSet<usize> = frames.iter().map(|f| f.device_label).collect();
        if devices.len() < 2 {
            return Err(Error::invalid(format!(
                "need labeled frames from at least 2 devices, got {}",
                devices.len()
            )));
        }
        Ok(LabelSpace {
            devices: devices.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn index_of(&self, device: usize) -> Result<usize> {
        self.devices.binary_search(&device).map_err(|_| {
            Error::invalid(format!("device {device} is outside the training label space"))
        })
    }
}

/// Anything that assigns a class index to each frame.
pub trait Predictor {
    fn label_space(&self) -> &LabelSpace;
    fn predict(&self, frames: &[&IqFrame]) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: ModelKind,
    pub seed: u64,
    pub source: SetId,
    pub target: SetId,
    pub accuracy: f64,
    /// Device ids labelling the confusion rows and columns.
    pub devices: Vec<usize>,
    /// `confusion[true][pred]` frame counts.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalResult {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Counts a predictor's decisions on every frame of `target`.
pub fn evaluate(
    model: &dyn Predictor,
    target: &CaptureSet,
    kind: ModelKind,
    seed: u64,
    source: SetId,
) -> Result<EvalResult> {
    let labels = model.label_space();
    let k = labels.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for cap in &target.captures {
        let truth = labels.index_of(cap.device_id)?;
        for chunk in cap.frames.chunks(EVAL_CHUNK) {
            let refs: Vec<&IqFrame> = chunk.iter().collect();
            for p in model.predict(&refs)? {
                if p >= k {
                    return Err(Error::invalid(format!("prediction {p} outside {k} classes")));
                }
                confusion[truth][p] += 1;
            }
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid(format!("target set {} has no frames", target.id())));
    }
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    Ok(EvalResult {
        model: kind,
        seed,
        source,
        target: target.id(),
        accuracy: correct as f64 / total as f64,
        devices: labels.devices.clone(),
        confusion,
    })
}

fn standardize_all<'a>(frames: impl Iterator<Item = &'a IqFrame>) -> Vec<IqFrame> {
    frames.map(IqFrame::standardized).collect()
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.n)
        .map(|b| {
            (0..logits.c)
                .fold((0, f32::NEG_INFINITY), |(bi, bv), c| {
                    let v = logits.at(c, b);
                    if v > bv {
                        (c, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

fn rows_f64(t: &Tensor) -> Vec<f64> {
    t.to_rows().into_iter().map(f64::from).collect()
}

/// Splits a `[c][2n][1]` tensor into its first and second halves.
fn halves(t: &Tensor) -> (Tensor, Tensor) {
    let n = t.n / 2;
    let mut a = Tensor::zeros(t.c, n, 1);
    let mut b = Tensor::zeros(t.c, n, 1);
    for c in 0..t.c {
        a.data[c * n..(c + 1) * n].copy_from_slice(&t.data[c * t.n..c * t.n + n]);
        b.data[c * n..(c + 1) * n].copy_from_slice(&t.data[c * t.n + n..(c + 1) * t.n]);
    }
    (a, b)
}

/// Row-major `2n × dim` gradients for the two halves, packed as `[dim][2n][1]`.
fn join_grad(first: &[f64], second: &[f64], n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(dim, 2 * n, 1);
    for b in 0..n {
        for c in 0..dim {
            t.data[c * 2 * n + b] = first[b * dim + c] as f32;
            t.data[c * 2 * n + n + b] = second[b * dim + c] as f32;
        }
    }
    t
}

/// One batch of weak and strong views stacked as `[weak; strong]`.
fn view_batch(
    frames: &[&UnlabeledFrame],
    aug: &AugmentConfig,
    seed: u64,
    epoch: usize,
    batch: usize,
) -> Result<(Tensor, Vec<u64>)> {
    let mut rng = rng_from(&[seed, aug.seed, STREAM_AUG, epoch as u64, batch as u64]);
    let mut weak = Vec::with_capacity(frames.len());
    let mut strong = Vec::with_capacity(frames.len());
    let mut y = Vec::with_capacity(frames.len());
    for f in frames {
        let p = make_pair(&f.frame, f.transmission_id, aug, &mut rng)?;
        weak.push(p.x_weak);
        strong.push(p.x_strong);
        y.push(p.transmission_id);
    }
    let all: Vec<&IqFrame> = weak.iter().chain(&strong).collect();
    Ok((frames_to_tensor(&all)?, y))
}

/// Contrastive loss of one stacked view batch under training-mode
/// statistics. Returns the loss and the gradient with respect to `q`.
fn contrastive_step(
    state: &mut ModelState,
    x: &Tensor,
    y: &[u64],
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let n = y.len();
    let dim = state.config.embedding_dim;
    let h = state.base.forward(x)?;
    let q = state.predictor.forward(&h);
    let k = state.momentum.forward(x)?;
    let (q_w, q_s) = halves(&q);
    let (k_w, k_s) = halves(&k);
    let (q_w, q_s, k_w, k_s) = (rows_f64(&q_w), rows_f64(&q_s), rows_f64(&k_w), rows_f64(&k_s));
    if !with_grad {
        return Ok((symmetrized_loss(&q_w, &k_s, &q_s, &k_w, y, dim, tau)?, None));
    }
    let g = symmetrized_loss_with_grad(&q_w, &k_s, &q_s, &k_w, y, dim, tau)?;
    Ok((g.loss, Some(join_grad(&g.dq_w, &g.dq_s, n, dim))))
}

/// Result of pre-training: the learned state and the mean loss per epoch.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub state: ModelState,
    pub epoch_losses: Vec<f64>,
}

/// Self-supervised pre-training on unlabeled frames.
///
/// Each batch is augmented into weak and strong views. Both views pass
/// through the base encoder and predictor (`q`) and the momentum encoder
/// (`k`); the symmetrized loss is minimized over base and predictor weights,
/// then the momentum encoder tracks the base by EMA. Target frames join the
/// pool only for [`DomainsUsed::SourceAndTarget`].
pub fn pretrain(
    source: &[UnlabeledFrame],
    target: &[UnlabeledFrame],
    encoder: &EncoderConfig,
    aug: &AugmentConfig,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    aug.validate()?;
    if source.is_empty() {
        return Err(Error::invalid("pre-training needs source frames"));
    }
    let mut pool: Vec<UnlabeledFrame> = source
        .iter()
        .map(|f| UnlabeledFrame {
            frame: f.frame.standardized(),
            transmission_id: f.transmission_id,
        })
        .collect();
    if cfg.domains_used == DomainsUsed::SourceAndTarget {
        let src_ids: BTreeSet<u64> = source.iter().map(|f| f.transmission_id).collect();
        if target.iter().any(|f| src_ids.contains(&f.transmission_id)) {
            return Err(Error::invalid("source and target share transmission ids"));
        }
        pool.extend(target.iter().map(|f| UnlabeledFrame {
            frame: f.frame.standardized(),
            transmission_id: f.transmission_id,
        }));
    }
    if pool.len() < 2 {
        return Err(Error::invalid("pre-training needs at least 2 frames"));
    }
    let mut state = ModelState::new(encoder, cfg.momentum_coeff, derive_seed(&[cfg.seed, STREAM_INIT]))?;
    let batch = cfg.batch_size.min(pool.len());
    let per_epoch = pool.len().div_ceil(batch);
    let total_steps = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(&[cfg.seed, STREAM_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for (b, idx) in order.chunks(batch).enumerate() {
            // A singleton batch has no negatives and breaks batch statistics.
            if idx.len() < 2 {
                continue;
            }
            let frames: Vec<&UnlabeledFrame> = idx.iter().map(|&i| &pool[i]).collect();
            let (x, y) = view_batch(&frames, aug, cfg.seed, epoch, b)?;
            state.base.zero_grad();
            state.predictor.zero_grad();
            let (loss, dq) = contrastive_step(&mut state, &x, &y, cfg.tau, true)?;
            let dh = state.predictor.backward(&dq.expect("gradient requested"));
            state.base.backward(&dh);
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let mut params = state.base.params_mut();
            params.extend(state.predictor.params_mut());
            opt.step(params, lr);
            state.momentum_update();
            if !loss.is_finite() {
                return Err(Error::invalid(format!("pre-training diverged at epoch {epoch}")));
            }
            sum += loss;
            count += 1;
            step += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    state.seed = cfg.seed;
    Ok(Pretrained { state, epoch_losses })
}

/// Symmetrized loss of `state` on one augmented batch, using batch
/// statistics as during training. `state` itself is not modified.
pub fn evaluate_contrastive_loss(
    state: &ModelState,
    frames: &[UnlabeledFrame],
    aug: &AugmentConfig,
    tau: f64,
    seed: u64,
) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::invalid("held-out batch needs at least 2 frames"));
    }
    let std: Vec<UnlabeledFrame> = frames
        .iter()
        .map(|f| UnlabeledFrame {
            frame: f.frame.standardized(),
            transmission_id: f.transmission_id,
        })
        .collect();
    let refs: Vec<&UnlabeledFrame> = std.iter().collect();
    let (x, y) = view_batch(&refs, aug, seed, usize::MAX, 0)?;
    let mut probe = state.clone();
    Ok(contrastive_step(&mut probe, &x, &y, tau, false)?.0)
}

/// A frozen (or fine-tuned) encoder with a device classifier on `h`.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: ModelState,
    pub classifier: ClassifierHead,
    pub labels: LabelSpace,
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
}

impl Predictor for TrainRun {
    fn label_space(&self) -> &LabelSpace {
        &self.labels
    }

    fn predict(&self, frames: &[&IqFrame]) -> Result<Vec<usize>> {
        let std = standardize_all(frames.iter().copied());
        let x = frames_to_tensor(&std.iter().collect::<Vec<_>>())?;
        let h = self.state.base.infer(&x)?;
        Ok(argmax_rows(&self.classifier.infer(&h)?))
    }
}

/// Runs the encoder over `frames` in inference mode, returning `[dim][n][1]`.
fn encode_all(state: &ModelState, frames: &[IqFrame]) -> Result<Tensor> {
    let dim = state.config.embedding_dim;
    let mut rows = Vec::with_capacity(frames.len() * dim);
    for chunk in frames.chunks(EVAL_CHUNK) {
        let x = frames_to_tensor(&chunk.iter().collect::<Vec<_>>())?;
        rows.extend(state.base.infer(&x)?.to_rows());
    }
    Ok(Tensor::from_rows(&rows, frames.len(), dim))
}

fn gather_columns(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.c, idx.len(), 1);
    for c in 0..t.c {
        for (b, &i) in idx.iter().enumerate() {
            out.data[c * idx.len() + b] = t.data[c * t.n + i];
        }
    }
    out
}

/// Trains the device classifier on source-domain labeled frames.
///
/// With `fine_tune` off the base encoder is a fixed feature extractor and
/// `h` is computed once; otherwise each batch runs through the encoder and
/// its weights are updated too.
pub fn train_classifier(state: &ModelState, labeled_source: &[LabeledFrame], cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let labels = LabelSpace::from_frames(labeled_source)?;
    let targets: Vec<usize> = labeled_source
        .iter()
        .map(|f| labels.index_of(f.device_label))
        .collect::<Result<_>>()?;
    let frames = standardize_all(labeled_source.iter().map(|f| &f.frame));
    let mut state = state.clone();
    let mut head = ClassifierHead::new(
        state.config.embedding_dim,
        cfg.hidden,
        labels.len(),
        derive_seed(&[cfg.seed, STREAM_CLASSIFIER]),
    )?;
    let features = if cfg.fine_tune {
        None
    } else {
        Some(encode_all(&state, &frames)?)
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut enc_opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(&[cfg.seed, STREAM_CLASSIFIER, epoch as u64]);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.fine_tune && idx.len() < 2 {
                continue;
            }
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            head.zero_grad();
            let h = match &features {
                Some(f) => gather_columns(f, idx),
                None => {
                    state.base.zero_grad();
                    let refs: Vec<&IqFrame> = idx.iter().map(|&i| &frames[i]).collect();
                    state.base.forward(&frames_to_tensor(&refs)?)?
                }
            };
            let (loss, dlogits) = softmax_cross_entropy(&head.forward(&h)?, &y);
            let dh = head.backward(&dlogits);
            opt.step(head.params_mut(), cfg.learning_rate);
            if features.is_none() {
                state.base.backward(&dh);
                enc_opt.step(state.base.params_mut(), cfg.learning_rate);
            }
            sum += loss as f64;
            count += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    Ok(TrainRun {
        state,
        classifier: head,
        labels,
        epoch_losses,
        seed: cfg.seed,
    })
}

/// Supervised baseline: the same backbone and a classifier head trained
/// jointly on labeled source frames.
#[derive(Debug, Clone)]
pub struct CnnModel {
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub labels: LabelSpace,
    pub epoch_losses: Vec<f64>,
}

impl Predictor for CnnModel {
    fn label_space(&self) -> &LabelSpace {
        &self.labels
    }

    fn predict(&self, frames: &[&IqFrame]) -> Result<Vec<usize>> {
        let std = standardize_all(frames.iter().copied());
        let x = frames_to_tensor(&std.iter().collect::<Vec<_>>())?;
        Ok(argmax_rows(&self.head.infer(&self.backbone.infer(&x)?)?))
    }
}

pub fn train_cnn(labeled_source: &[LabeledFrame], encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<CnnModel> {
    cfg.validate()?;
    encoder.validate()?;
    let labels = LabelSpace::from_frames(labeled_source)?;
    let targets: Vec<usize> = labeled_source
        .iter()
        .map(|f| labels.index_of(f.device_label))
        .collect::<Result<_>>()?;
    let frames = standardize_all(labeled_source.iter().map(|f| &f.frame));
    let mut rng = rng_from(&[cfg.seed, STREAM_CNN]);
    let mut backbone = Backbone::new(encoder, &mut rng);
    let mut head = ClassifierHead::new(
        backbone.out_channels(),
        cfg.hidden,
        labels.len(),
        derive_seed(&[cfg.seed, STREAM_CNN, 1]),
    )?;
    let batch = cfg.batch_size.max(2);
    let total_steps = cfg.cnn_epochs * frames.len().div_ceil(batch);
    let mut opt_b = AdamW::new(cfg.weight_decay);
    let mut opt_h = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.cnn_epochs);
    let mut step = 0;
    for epoch in 0..cfg.cnn_epochs {
        let mut rng = rng_from(&[cfg.seed, STREAM_CNN, 2, epoch as u64]);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in order.chunks(batch) {
            if idx.len() < 2 {
                continue;
            }
            let refs: Vec<&IqFrame> = idx.iter().map(|&i| &frames[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            backbone.zero_grad();
            head.zero_grad();
            let feat = backbone.forward(&frames_to_tensor(&refs)?)?;
            let (loss, dlogits) = softmax_cross_entropy(&head.forward(&feat)?, &y);
            let dfeat = head.backward(&dlogits);
            backbone.backward(&dfeat);
            let lr = cosine_lr(cfg.cnn_learning_rate, step, total_steps);
            opt_b.step(backbone.params_mut(), lr);
            opt_h.step(head.params_mut(), lr);
            sum += loss as f64;
            count += 1;
            step += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    Ok(CnnModel {
        backbone,
        head,
        labels,
        epoch_losses,
    })
}

pub fn run_cnn_baseline(
    source: &CaptureSet,
    target: &CaptureSet,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<EvalResult> {
    let model = train_cnn(&source.labeled_frames(), encoder, cfg)?;
    evaluate(&model, target, ModelKind::Cnn, cfg.seed, source.id())
}

/// Everything a grid run needs besides the capture sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

/// Trains and evaluates one model on one (source, target) pair.
pub fn run_cell(
    source: &CaptureSet,
    target: &CaptureSet,
    kind: ModelKind,
    seed: u64,
    settings: &RunSettings,
) -> Result<EvalResult> {
    let mut train = settings.train.clone();
    train.seed = seed;
    match kind {
        ModelKind::Cnn => run_cnn_baseline(source, target, &settings.encoder, &train),
        ModelKind::Ab | ModelKind::Ctl => {
            let mut pre = settings.pretrain.for_kind(kind);
            pre.seed = seed;
            let target_frames = match kind {
                ModelKind::Ctl => target.unlabeled_frames(),
                _ => Vec::new(),
            };
            let p = pretrain(&source.unlabeled_frames(), &target_frames, &settings.encoder, &settings.augment, &pre)?;
            let run = train_classifier(&p.state, &source.labeled_frames(), &train)?;
            evaluate(&run, target, kind, seed, source.id())
        }
    }
}

/// Executes every (pair, model, seed) cell. Results come back in grid
/// order: pair-major, then model, then seed.
pub fn run_matrix(
    sets: &BTreeMap<SetId, CaptureSet>,
    pairs: &[(SetId, SetId)],
    models: &[ModelKind],
    seeds: &[u64],
    settings: &RunSettings,
) -> Result<Vec<EvalResult>> {
    let lookup = |id: &SetId| {
        sets.get(id)
            .ok_or_else(|| Error::invalid(format!("capture set {id} is not available")))
    };
    let mut jobs = Vec::new();
    for (s, t) in pairs {
        if s.day == t.day {
            return Err(Error::invalid(format!("{s} and {t} come from the same day")));
        }
        let (src, tgt) = (lookup(s)?, lookup(t)?);
        for &m in models {
            for &seed in seeds {
                jobs.push((src, tgt, m, seed));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(s, t, m, seed)| run_cell(s, t, m, seed, settings))
        .collect()
}

/// Lowercase hex SHA-256 of every frame of a capture set, in order.
pub fn capture_set_digest(set: &CaptureSet) -> String {
    let mut h = Sha256::new();
    for cap in &set.captures {
        h.update((cap.device_id as u64).to_le_bytes());
        h.update(cap.transmission_id.to_le_bytes());
        for f in &cap.frames {
            for v in f.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every result bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub pairs: Vec<(SetId, SetId)>,
    pub models: Vec<ModelKind>,
    /// Digest per capture set that took part in the run.
    pub dataset_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        config: serde_json::Value,
        seeds: &[u64],
        pairs: &[(SetId, SetId)],
        models: &[ModelKind],
        sets: &BTreeMap<SetId, CaptureSet>,
    ) -> Self {
        let used: BTreeSet<SetId> = pairs.iter().flat_map(|(s, t)| [*s, *t]).collect();
        let dataset_hashes = used
            .iter()
            .filter_map(|id| sets.get(id).map(|s| (id.to_string(), capture_set_digest(s))))
            .collect();
        RunManifest {
            tool: "rfctl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds: seeds.to_vec(),
            pairs: pairs.to_vec(),
            models: models.to_vec(),
            dataset_hashes,
        }
    }
}
