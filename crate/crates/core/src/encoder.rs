//! Base and momentum encoders, predictor, classifier head and checkpoints.
//!
//! The backbone is a 1-D residual network over time with I and Q as two
//! input channels. Its stem convolution uses a long kernel and stride
//! (100 / 20 by default), followed by residual stages of basic blocks and
//! global average pooling. A projector MLP maps the pooled features to a
//! 128-dim embedding `h`; the predictor MLP on top of `h` yields `q`; the
//! momentum twin of backbone+projector yields `k`. All three are
//! L2-normalized.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataio::IqFrame;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward, relu_backward_inplace,
    relu_inplace, BatchNorm, Conv1d, Linear, Module, Param, Tensor,
};
use crate::rng::{rng_from, Rng};

pub const EMBEDDING_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Frame width W; the input is 2×W.
    pub window: usize,
    pub first_conv_kernel: usize,
    pub first_conv_stride: usize,
    pub embedding_dim: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    /// Output channels of each residual stage.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Pre-training batches mix source and target frames, so batch-norm
    /// statistics are computed over the mixed batch. Recorded for
    /// provenance; no other mode is implemented.
    pub mixed_domain_batch_stats: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            window: 1000,
            first_conv_kernel: 100,
            first_conv_stride: 20,
            embedding_dim: EMBEDDING_DIM,
            projector_hidden: 512,
            predictor_hidden: 512,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            mixed_domain_batch_stats: true,
        }
    }
}

impl EncoderConfig {
    /// Reduced-depth settings for CPU-scale experiments.
    pub fn desk() -> Self {
        EncoderConfig {
            projector_hidden: 256,
            predictor_hidden: 256,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            ..Self::default()
        }
    }

    /// Time steps after the stem convolution.
    pub fn stem_len(&self) -> Option<usize> {
        (self.window >= self.first_conv_kernel && self.first_conv_stride > 0)
            .then(|| (self.window - self.first_conv_kernel) / self.first_conv_stride + 1)
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(Error::invalid(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.stem_len().is_none() {
            return Err(Error::invalid(format!(
                "stem kernel {} / stride {} does not fit window {}",
                self.first_conv_kernel, self.first_conv_stride, self.window
            )));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::invalid("stage_widths must be non-empty and positive"));
        }
        if self.blocks_per_stage == 0 || self.projector_hidden == 0 || self.predictor_hidden == 0 {
            return Err(Error::invalid("block count and hidden sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Shortcut {
    conv: Conv1d,
    bn: BatchNorm,
}

/// conv3-BN-ReLU-conv3-BN plus identity or projected shortcut, then ReLU.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
    shortcut: Option<Shortcut>,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut {
            conv: Conv1d::new(cin, cout, 1, stride, 0, rng),
            bn: BatchNorm::new(cout),
        });
        BasicBlock {
            conv1: Conv1d::new(cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv1d::new(cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm::new(cout),
            shortcut,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut a);
        let mut b = self.bn2.forward(&self.conv2.forward(&a));
        match &mut self.shortcut {
            Some(sc) => {
                let s = sc.bn.forward(&sc.conv.forward(x));
                b.data.iter_mut().zip(&s.data).for_each(|(v, s)| *v += s);
            }
            None => b.data.iter_mut().zip(&x.data).for_each(|(v, s)| *v += s),
        }
        relu_inplace(&mut b);
        self.cache = Some((a.data, b.data.clone()));
        b
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.infer(&self.conv1.infer(x));
        relu_inplace(&mut a);
        let mut b = self.bn2.infer(&self.conv2.infer(&a));
        match &self.shortcut {
            Some(sc) => {
                let s = sc.bn.infer(&sc.conv.infer(x));
                b.data.iter_mut().zip(&s.data).for_each(|(v, s)| *v += s);
            }
            None => b.data.iter_mut().zip(&x.data).for_each(|(v, s)| *v += s),
        }
        relu_inplace(&mut b);
        b
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (a, y) = self.cache.take().expect("block backward without forward");
        let mut dz = dy.clone();
        relu_backward_inplace(&mut dz, &y);
        let mut da = self
            .conv2
            .backward(&self.bn2.backward(&dz), true)
            .expect("input grad");
        relu_backward_inplace(&mut da, &a);
        let mut dx = self
            .conv1
            .backward(&self.bn1.backward(&da), true)
            .expect("input grad");
        let ds = match &mut self.shortcut {
            Some(sc) => sc.conv.backward(&sc.bn.backward(&dz), true).expect("input grad"),
            None => dz,
        };
        dx.data.iter_mut().zip(&ds.data).for_each(|(v, s)| *v += s);
        dx
    }
}

impl Module for BasicBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some(sc) = &self.shortcut {
            p.extend(sc.conv.params());
            p.extend(sc.bn.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some(sc) = &mut self.shortcut {
            p.extend(sc.conv.params_mut());
            p.extend(sc.bn.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&Vec<f32>> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some(sc) = &self.shortcut {
            b.extend(sc.bn.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut b = self.bn1.buffers_mut();
        b.extend(self.bn2.buffers_mut());
        if let Some(sc) = &mut self.shortcut {
            b.extend(sc.bn.buffers_mut());
        }
        b
    }
}

/// Stem convolution, residual stages and global average pooling.
#[derive(Debug, Clone)]
pub struct Backbone {
    window: usize,
    stem: Conv1d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    out_channels: usize,
    cache: Option<(Vec<f32>, usize)>,
}

impl Backbone {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let c0 = cfg.stage_widths[0];
        let stem = Conv1d::new(2, c0, cfg.first_conv_kernel, cfg.first_conv_stride, 0, rng);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (s, &w) in cfg.stage_widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, w, stride, rng));
                cin = w;
            }
        }
        Backbone {
            window: cfg.window,
            stem,
            stem_bn: BatchNorm::new(c0),
            blocks,
            out_channels: cin,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Output length of the stem convolution for a `window`-sample input.
    pub fn stem_out_len(&self, window: usize) -> Option<usize> {
        self.stem.out_len(window)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != 2 || x.l != self.window {
            return Err(Error::invalid(format!(
                "expected frames of shape 2x{}, got {}x{}",
                self.window, x.c, x.l
            )));
        }
        if !x.is_finite() {
            return Err(Error::invalid("input batch contains non-finite values"));
        }
        Ok(())
    }

    /// Training-mode forward pass; returns `[features][batch]`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem_bn.forward(&self.stem.forward(x));
        relu_inplace(&mut h);
        let stem_out = h.data.clone();
        for block in &mut self.blocks {
            h = block.forward(&h);
        }
        self.cache = Some((stem_out, h.l));
        Ok(global_avg_pool(&h))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem_bn.infer(&self.stem.infer(x));
        relu_inplace(&mut h);
        for block in &self.blocks {
            h = block.infer(&h);
        }
        Ok(global_avg_pool(&h))
    }

    pub fn backward(&mut self, dfeat: &Tensor) {
        let (stem_out, l) = self.cache.take().expect("backbone backward without forward");
        let mut g = global_avg_pool_backward(dfeat, l);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        relu_backward_inplace(&mut g, &stem_out);
        let g = self.stem_bn.backward(&g);
        self.stem.backward(&g, false);
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&Vec<f32>> {
        let mut v = self.stem_bn.buffers();
        for b in &self.blocks {
            v.extend(b.buffers());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = self.stem_bn.buffers_mut();
        for b in &mut self.blocks {
            v.extend(b.buffers_mut());
        }
        v
    }
}

/// linear → batch norm → ReLU → linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
    cache: Option<Vec<f32>>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Mlp {
            fc1: Linear::new(input, hidden, rng),
            bn: BatchNorm::new(hidden),
            fc2: Linear::new(hidden, output, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut a = self.bn.forward(&self.fc1.forward(x));
        relu_inplace(&mut a);
        let y = self.fc2.forward(&a);
        self.cache = Some(a.data);
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut a = self.bn.infer(&self.fc1.infer(x));
        relu_inplace(&mut a);
        self.fc2.infer(&a)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let a = self.cache.take().expect("mlp backward without forward");
        let mut da = self.fc2.backward(dy);
        relu_backward_inplace(&mut da, &a);
        self.fc1.backward(&self.bn.backward(&da))
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.bn.params());
        p.extend(self.fc2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.bn.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Vec<f32>> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.bn.buffers_mut()
    }
}

/// An MLP head whose output is L2-normalized per sample.
#[derive(Debug, Clone)]
pub struct NormalizedHead {
    mlp: Mlp,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl NormalizedHead {
    fn new(mlp: Mlp) -> Self {
        NormalizedHead { mlp, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, norms) = l2_normalize(&self.mlp.forward(x));
        self.cache = Some((y.clone(), norms));
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        l2_normalize(&self.mlp.infer(x)).0
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (y, norms) = self.cache.take().expect("head backward without forward");
        self.mlp.backward(&l2_normalize_backward(dy, &y, &norms))
    }
}

impl Module for NormalizedHead {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
    fn buffers(&self) -> Vec<&Vec<f32>> {
        self.mlp.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.mlp.buffers_mut()
    }
}

/// Backbone followed by the projector; outputs unit-norm `h`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub backbone: Backbone,
    pub projector: NormalizedHead,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let backbone = Backbone::new(cfg, rng);
        let projector = NormalizedHead::new(Mlp::new(
            backbone.out_channels(),
            cfg.projector_hidden,
            cfg.embedding_dim,
            rng,
        ));
        Encoder {
            backbone,
            projector,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let f = self.backbone.forward(x)?;
        Ok(self.projector.forward(&f))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.projector.infer(&self.backbone.infer(x)?))
    }

    pub fn backward(&mut self, dh: &Tensor) {
        let df = self.projector.backward(dh);
        self.backbone.backward(&df);
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.extend(self.projector.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.projector.params_mut());
        p
    }
    fn buffers(&self) -> Vec<&Vec<f32>> {
        let mut b = self.backbone.buffers();
        b.extend(self.projector.buffers());
        b
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut b = self.backbone.buffers_mut();
        b.extend(self.projector.buffers_mut());
        b
    }
}

/// Packs frames into a `[2][n][W]` tensor.
pub fn frames_to_tensor(frames: &[&IqFrame]) -> Result<Tensor> {
    let w = frames
        .first()
        .map(|f| f.width())
        .ok_or_else(|| Error::invalid("empty frame batch"))?;
    if let Some(f) = frames.iter().find(|f| f.width() != w) {
        return Err(Error::invalid(format!(
            "mixed frame widths in batch: {w} and {}",
            f.width()
        )));
    }
    Ok(Tensor::from_samples(frames.iter().map(|f| f.data()), 2, w))
}

/// Embeddings as row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: Vec<f32>,
    pub n: usize,
    pub dim: usize,
}

impl Embeddings {
    fn from_tensor(t: &Tensor) -> Self {
        Embeddings {
            rows: t.to_rows(),
            n: t.n,
            dim: t.c,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.rows, self.n, self.dim)
    }
}

/// Everything learned during pre-training.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub base: Encoder,
    pub momentum: Encoder,
    pub predictor: NormalizedHead,
    pub momentum_coeff: f32,
    pub seed: u64,
}

impl ModelState {
    /// Fresh weights; the momentum encoder starts as an exact copy of the
    /// base encoder.
    pub fn new(config: &EncoderConfig, momentum_coeff: f32, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(0.0..1.0).contains(&momentum_coeff) {
            return Err(Error::invalid(format!(
                "momentum coefficient must be in [0, 1), got {momentum_coeff}"
            )));
        }
        let mut rng = rng_from(&[seed, 0x00e4_c0de]);
        let base = Encoder::new(config, &mut rng);
        let predictor = NormalizedHead::new(Mlp::new(
            config.embedding_dim,
            config.predictor_hidden,
            config.embedding_dim,
            &mut rng,
        ));
        Ok(ModelState {
            config: config.clone(),
            momentum: base.clone(),
            base,
            predictor,
            momentum_coeff,
            seed,
        })
    }

    /// Inference-mode `h` for a batch of frames.
    pub fn encode_base(&self, frames: &[&IqFrame]) -> Result<Embeddings> {
        Ok(Embeddings::from_tensor(&self.base.infer(&frames_to_tensor(frames)?)?))
    }

    /// Inference-mode `k` for a batch of frames.
    pub fn encode_momentum(&self, frames: &[&IqFrame]) -> Result<Embeddings> {
        Ok(Embeddings::from_tensor(
            &self.momentum.infer(&frames_to_tensor(frames)?)?,
        ))
    }

    /// Inference-mode `q` from `h`.
    pub fn predict(&self, h: &Embeddings) -> Result<Embeddings> {
        if h.dim != self.config.embedding_dim {
            return Err(Error::invalid(format!(
                "predictor expects {}-dim input, got {}",
                self.config.embedding_dim, h.dim
            )));
        }
        Ok(Embeddings::from_tensor(&self.predictor.infer(&h.to_tensor())))
    }

    /// `θ_k ← m·θ_k + (1 − m)·θ_q` over backbone and projector parameters.
    pub fn momentum_update(&mut self) {
        momentum_update(&mut self.momentum, &self.base, self.momentum_coeff);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            kind: "model_state".into(),
            config: self.config.clone(),
            momentum_coeff: self.momentum_coeff,
            seed: self.seed,
        };
        let mut tensors: Vec<&[f32]> = Vec::new();
        collect_values(&self.base, &mut tensors);
        collect_values(&self.momentum, &mut tensors);
        collect_values(&self.predictor, &mut tensors);
        write_checkpoint(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (ModelHeader, _) = read_checkpoint(path)?;
        if header.kind != "model_state" {
            return Err(Error::format(path, format!("not a model checkpoint: {}", header.kind)));
        }
        let mut state = ModelState::new(&header.config, header.momentum_coeff, header.seed)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut it = tensors.into_iter();
        restore_values(&mut state.base, &mut it, path)?;
        restore_values(&mut state.momentum, &mut it, path)?;
        restore_values(&mut state.predictor, &mut it, path)?;
        if it.next().is_some() {
            return Err(Error::format(path, "checkpoint has extra tensors"));
        }
        Ok(state)
    }
}

/// Exponential moving average of `source` parameters into `target`.
/// Batch-norm running statistics are not averaged; each encoder keeps its own.
pub fn momentum_update(target: &mut impl Module, source: &impl Module, m: f32) {
    let src = source.params();
    let dst = target.params_mut();
    assert_eq!(src.len(), dst.len(), "momentum twins differ in structure");
    for (k, q) in dst.into_iter().zip(src) {
        assert_eq!(k.shape, q.shape, "momentum twins differ in shape");
        if m == 0.0 {
            k.value.copy_from_slice(&q.value);
        } else {
            // Written as an increment so that equal twins stay bitwise equal.
            let step = 1.0 - m;
            for (kv, &qv) in k.value.iter_mut().zip(&q.value) {
                *kv += step * (qv - *kv);
            }
        }
    }
}

/// Two-hidden-layer ReLU MLP producing class logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    layers: Vec<Linear>,
    cache: Vec<Vec<f32>>,
    pub input_dim: usize,
    pub hidden: (usize, usize),
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(input_dim: usize, hidden: (usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || input_dim == 0 || hidden.0 == 0 || hidden.1 == 0 {
            return Err(Error::invalid(format!(
                "classifier needs >= 2 classes and positive widths, got {input_dim}->{hidden:?}->{num_classes}"
            )));
        }
        let mut rng = rng_from(&[seed, 0x000c_1a55]);
        let layers = vec![
            Linear::new(input_dim, hidden.0, &mut rng),
            Linear::new(hidden.0, hidden.1, &mut rng),
            Linear::new(hidden.1, num_classes, &mut rng),
        ];
        Ok(ClassifierHead {
            layers,
            cache: Vec::new(),
            input_dim,
            hidden,
            num_classes,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.c != self.input_dim || x.l != 1 {
            return Err(Error::invalid(format!(
                "classifier expects {}-dim features, got {}",
                self.input_dim, x.c
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        self.cache.clear();
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h);
            if i < last {
                relu_inplace(&mut h);
                self.cache.push(h.data.clone());
            }
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h);
            if i < last {
                relu_inplace(&mut h);
            }
        }
        Ok(h)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Tensor {
        let mut g = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let out = self.cache.pop().expect("classifier backward without forward");
                relu_backward_inplace(&mut g, &out);
            }
            g = self.layers[i].backward(&g);
        }
        g
    }

    /// Logits as row-major `n × num_classes` for `n × input_dim` features.
    pub fn classify(&self, h: &Embeddings) -> Result<Embeddings> {
        Ok(Embeddings::from_tensor(&self.infer(&h.to_tensor())?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = HeadHeader {
            kind: "classifier".into(),
            input_dim: self.input_dim,
            hidden: self.hidden,
            num_classes: self.num_classes,
        };
        let mut tensors = Vec::new();
        collect_values(self, &mut tensors);
        write_checkpoint(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, tensors): (HeadHeader, _) = read_checkpoint(path)?;
        if h.kind != "classifier" {
            return Err(Error::format(path, format!("not a classifier checkpoint: {}", h.kind)));
        }
        let mut head = ClassifierHead::new(h.input_dim, h.hidden, h.num_classes, 0)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut it = tensors.into_iter();
        restore_values(&mut head, &mut it, path)?;
        Ok(head)
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: EncoderConfig,
    momentum_coeff: f32,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HeadHeader {
    kind: String,
    input_dim: usize,
    hidden: (usize, usize),
    num_classes: usize,
}

fn collect_values<'a>(m: &'a impl Module, out: &mut Vec<&'a [f32]>) {
    out.extend(m.params().into_iter().map(|p| p.value.as_slice()));
    out.extend(m.buffers().into_iter().map(|b| b.as_slice()));
}

fn restore_values(
    m: &mut impl Module,
    it: &mut impl Iterator<Item = Vec<f32>>,
    path: &Path,
) -> Result<()> {
    let mut take = |dst: &mut Vec<f32>| -> Result<()> {
        let src = it
            .next()
            .ok_or_else(|| Error::format(path, "checkpoint is missing tensors"))?;
        if src.len() != dst.len() {
            return Err(Error::format(
                path,
                format!("tensor has {} values, model expects {}", src.len(), dst.len()),
            ));
        }
        *dst = src;
        Ok(())
    };
    for p in m.params_mut() {
        take(&mut p.value)?;
    }
    for b in m.buffers_mut() {
        take(b)?;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RFCTLCK1";

/// Binary checkpoint: magic, u64 header length, JSON header, then for each
/// tensor a u64 length followed by little-endian `f32` values.
fn write_checkpoint(path: &Path, header: &impl Serialize, tensors: &[&[f32]]) -> Result<()> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let total: usize = tensors.iter().map(|t| 8 + 4 * t.len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in *t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_checkpoint<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<Vec<f32>>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let truncated = || Error::format(path, "checkpoint is truncated");
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + n).ok_or_else(truncated)?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let read_u64 = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
    let hlen = read_u64(take(8)?);
    let header: H =
        serde_json::from_slice(take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
    let mut tensors = Vec::new();
    loop {
        let Ok(len) = take(8) else { break };
        let len = read_u64(len);
        let bytes = take(len.checked_mul(4).ok_or_else(truncated)?)?;
        tensors.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    Ok((header, tensors))
}
