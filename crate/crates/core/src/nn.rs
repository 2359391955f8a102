//! Minimal layer library with hand-written backward passes.
//!
//! Activations are stored channel-major as `[c][n][l]` (channel, batch,
//! time), so a convolution is one GEMM over an im2col buffer and a linear
//! layer is the `l = 1` special case. Each layer caches what its backward
//! pass needs during a training-mode forward; `backward` consumes the cache,
//! accumulates parameter gradients and returns the input gradient.
//! `infer` runs the same layer in evaluation mode through a shared borrow.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense activation tensor in `[c][n][l]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub c: usize,
    pub n: usize,
    pub l: usize,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, l: usize) -> Self {
        Tensor {
            data: vec![0.0; c * n * l],
            c,
            n,
            l,
        }
    }

    pub fn from_vec(data: Vec<f32>, c: usize, n: usize, l: usize) -> Self {
        assert_eq!(data.len(), c * n * l, "tensor shape mismatch");
        Tensor { data, c, n, l }
    }

    /// Builds a `[c][n][l]` tensor from per-sample `[c][l]` blocks.
    pub fn from_samples<'a>(samples: impl ExactSizeIterator<Item = &'a [f32]>, c: usize, l: usize) -> Self {
        let n = samples.len();
        let mut t = Tensor::zeros(c, n, l);
        for (b, s) in samples.enumerate() {
            assert_eq!(s.len(), c * l, "sample shape mismatch");
            for ch in 0..c {
                let dst = (ch * n + b) * l;
                t.data[dst..dst + l].copy_from_slice(&s[ch * l..(ch + 1) * l]);
            }
        }
        t
    }

    /// Value at feature `c`, sample `n` of an `l = 1` tensor.
    pub fn at(&self, c: usize, n: usize) -> f32 {
        self.data[c * self.n + n]
    }

    /// Row-major `n × c` copy of an `l = 1` tensor.
    pub fn to_rows(&self) -> Vec<f32> {
        debug_assert_eq!(self.l, 1);
        let mut out = vec![0.0; self.c * self.n];
        for c in 0..self.c {
            for b in 0..self.n {
                out[b * self.c + c] = self.data[c * self.n + b];
            }
        }
        out
    }

    pub fn from_rows(rows: &[f32], n: usize, c: usize) -> Self {
        let mut t = Tensor::zeros(c, n, 1);
        for b in 0..n {
            for ch in 0..c {
                t.data[ch * n + b] = rows[b * c + ch];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.len() != self.value.len() {
            self.zero_grad();
        }
        &mut self.grad
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape.clone()).collect()
    }

    /// Non-trainable state such as batch-norm running statistics.
    fn buffers(&self) -> Vec<&Vec<f32>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        Vec::new()
    }
}

/// `C = A·B + beta·C` for row-stride/col-stride described operands; `C` is
/// dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
struct ConvCache {
    col: Vec<f32>,
    n: usize,
    lin: usize,
    lout: usize,
}

/// 1-D convolution without bias (always followed by batch norm here).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout][cin * kernel]`
    pub weight: Param,
    cache: Option<ConvCache>,
}

impl Conv1d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let value = (0..cout * cin * kernel).map(|_| normal.sample(rng)).collect();
        Conv1d {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::new(vec![cout, cin, kernel], value),
            cache: None,
        }
    }

    pub fn out_len(&self, lin: usize) -> Option<usize> {
        let padded = lin + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn im2col(&self, x: &Tensor, lout: usize) -> Vec<f32> {
        let (n, lin, k) = (x.n, x.l, self.kernel);
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.data.clone();
        }
        let p = n * lout;
        let mut col = vec![0.0; self.cin * k * p];
        for ci in 0..self.cin {
            for kk in 0..k {
                let row = (ci * k + kk) * p;
                for b in 0..n {
                    let src = &x.data[(ci * n + b) * lin..(ci * n + b + 1) * lin];
                    let dst = &mut col[row + b * lout..row + (b + 1) * lout];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let pos = (t * self.stride + kk) as isize - self.pad as isize;
                        if pos >= 0 && (pos as usize) < lin {
                            *d = src[pos as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f32], n: usize, lin: usize, lout: usize) -> Tensor {
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return Tensor::from_vec(dcol.to_vec(), self.cin, n, lin);
        }
        let p = n * lout;
        let mut dx = Tensor::zeros(self.cin, n, lin);
        for ci in 0..self.cin {
            for kk in 0..k {
                let row = (ci * k + kk) * p;
                for b in 0..n {
                    let src = &dcol[row + b * lout..row + (b + 1) * lout];
                    let dst = &mut dx.data[(ci * n + b) * lin..(ci * n + b + 1) * lin];
                    for (t, &g) in src.iter().enumerate() {
                        let pos = (t * self.stride + kk) as isize - self.pad as isize;
                        if pos >= 0 && (pos as usize) < lin {
                            dst[pos as usize] += g;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, cache) = self.apply(x);
        self.cache = Some(cache);
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.apply(x).0
    }

    fn apply(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let lout = self.out_len(x.l).expect("input shorter than kernel");
        let col = self.im2col(x, lout);
        let kdim = self.cin * self.kernel;
        let p = x.n * lout;
        let mut y = Tensor::zeros(self.cout, x.n, lout);
        gemm(
            self.cout,
            kdim,
            p,
            &self.weight.value,
            (kdim, 1),
            &col,
            (p, 1),
            0.0,
            &mut y.data,
        );
        let cache = ConvCache {
            col,
            n: x.n,
            lin: x.l,
            lout,
        };
        (y, cache)
    }

    /// Accumulates the weight gradient; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let cache = self.cache.take().expect("conv backward without forward");
        let kdim = self.cin * self.kernel;
        let p = cache.n * cache.lout;
        assert_eq!(dy.data.len(), self.cout * p);
        gemm(
            self.cout,
            p,
            kdim,
            &dy.data,
            (p, 1),
            &cache.col,
            (1, p),
            1.0,
            self.weight.grad_mut(),
        );
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![0.0; kdim * p];
        gemm(
            kdim,
            self.cout,
            p,
            &self.weight.value,
            (1, kdim),
            &dy.data,
            (p, 1),
            0.0,
            &mut dcol,
        );
        Some(self.col2im(&dcol, cache.n, cache.lin, cache.lout))
    }
}

impl Module for Conv1d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }
}

/// Fully connected layer on `[features][batch]` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `[fan_out][fan_in]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            fan_in,
            fan_out,
            weight: Param::new(vec![fan_out, fan_in], w),
            bias: Param::new(vec![fan_out], b),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.fan_in, "linear input width");
        assert_eq!(x.l, 1);
        let n = x.n;
        let mut y = Tensor::zeros(self.fan_out, n, 1);
        for (o, row) in y.data.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias.value[o]);
        }
        gemm(
            self.fan_out,
            self.fan_in,
            n,
            &self.weight.value,
            (self.fan_in, 1),
            &x.data,
            (n, 1),
            1.0,
            &mut y.data,
        );
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.n;
        gemm(
            self.fan_out,
            n,
            self.fan_in,
            &dy.data,
            (n, 1),
            &x.data,
            (1, n),
            1.0,
            self.weight.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for (o, row) in dy.data.chunks_exact(n).enumerate() {
            db[o] += row.iter().sum::<f32>();
        }
        let mut dx = Tensor::zeros(self.fan_in, n, 1);
        gemm(
            self.fan_in,
            self.fan_out,
            n,
            &self.weight.value,
            (1, self.fan_in),
            &dy.data,
            (n, 1),
            0.0,
            &mut dx.data,
        );
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Batch normalization over the batch and time axes of each channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Normalizes with the running averages.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let m = x.n * x.l;
        let mut y = Tensor::zeros(x.c, x.n, x.l);
        for c in 0..x.c {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let (g, b, mu) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
            let src = &x.data[c * m..(c + 1) * m];
            for (d, &v) in y.data[c * m..(c + 1) * m].iter_mut().zip(src) {
                *d = g * (v - mu) * inv + b;
            }
        }
        y
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let m = x.n * x.l;
        let mut y = Tensor::zeros(x.c, x.n, x.l);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let src = &x.data[c * m..(c + 1) * m];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var as f32 + self.eps).sqrt();
            inv_std[c] = inv;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let mean = mean as f32;
            let xs = &mut xhat[c * m..(c + 1) * m];
            for ((h, d), &v) in xs.iter_mut().zip(&mut y.data[c * m..(c + 1) * m]).zip(src) {
                *h = (v - mean) * inv;
                *d = g * *h + b;
            }
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            let mo = self.momentum;
            self.running_mean[c] = (1.0 - mo) * self.running_mean[c] + mo * mean;
            self.running_var[c] = (1.0 - mo) * self.running_var[c] + mo * unbiased as f32;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward without forward");
        let m = dy.n * dy.l;
        let mut dx = Tensor::zeros(dy.c, dy.n, dy.l);
        for c in 0..dy.c {
            let g = &dy.data[c * m..(c + 1) * m];
            let h = &cache.xhat[c * m..(c + 1) * m];
            let sum_g: f32 = g.iter().sum();
            let sum_gh: f32 = g.iter().zip(h).map(|(a, b)| a * b).sum();
            self.gamma.grad_mut()[c] += sum_gh;
            self.beta.grad_mut()[c] += sum_g;
            let scale = self.gamma.value[c] * cache.inv_std[c] / m as f32;
            for ((d, &gi), &hi) in dx.data[c * m..(c + 1) * m].iter_mut().zip(g).zip(h) {
                *d = scale * (m as f32 * gi - sum_g - hi * sum_gh);
            }
        }
        dx
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Vec<f32>> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(dy: &mut Tensor, out: &[f32]) {
    for (g, &o) in dy.data.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.c, x.n, 1);
    let inv = 1.0 / x.l as f32;
    for (d, row) in y.data.iter_mut().zip(x.data.chunks_exact(x.l)) {
        *d = row.iter().sum::<f32>() * inv;
    }
    y
}

pub fn global_avg_pool_backward(dy: &Tensor, l: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.n, l);
    let inv = 1.0 / l as f32;
    for (row, &g) in dx.data.chunks_exact_mut(l).zip(&dy.data) {
        row.fill(g * inv);
    }
    dx
}

/// Normalizes each sample (column) of an `l = 1` tensor to unit L2 norm.
/// Returns the normalized tensor and the per-sample norms.
pub fn l2_normalize(x: &Tensor) -> (Tensor, Vec<f32>) {
    let (d, n) = (x.c, x.n);
    let mut norms = vec![0f32; n];
    for c in 0..d {
        for (b, nb) in norms.iter_mut().enumerate() {
            *nb += x.data[c * n + b].powi(2);
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt().max(1e-12);
    }
    let mut y = x.clone();
    for c in 0..d {
        for b in 0..n {
            y.data[c * n + b] /= norms[b];
        }
    }
    (y, norms)
}

/// Backward of [`l2_normalize`]: `dx = (dy - y·⟨y, dy⟩) / ‖x‖`.
pub fn l2_normalize_backward(dy: &Tensor, y: &Tensor, norms: &[f32]) -> Tensor {
    let (d, n) = (y.c, y.n);
    let mut dots = vec![0f32; n];
    for c in 0..d {
        for (b, db) in dots.iter_mut().enumerate() {
            *db += y.data[c * n + b] * dy.data[c * n + b];
        }
    }
    let mut dx = Tensor::zeros(d, n, 1);
    for c in 0..d {
        for b in 0..n {
            let i = c * n + b;
            dx.data[i] = (dy.data[i] - y.data[i] * dots[b]) / norms[b];
        }
    }
    dx
}

/// Mean softmax cross-entropy over a `[classes][batch]` logit tensor.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let (k, n) = (logits.c, logits.n);
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(k, n, 1);
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        let max = (0..k).map(|c| logits.at(c, b)).fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = (0..k).map(|c| ((logits.at(c, b) - max) as f64).exp()).sum();
        loss += z.ln() - (logits.at(label, b) - max) as f64;
        for c in 0..k {
            let p = ((logits.at(c, b) - max) as f64).exp() / z;
            let target = if c == label { 1.0 } else { 0.0 };
            grad.data[c * n + b] = ((p - target) / n as f64) as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, lr: f32) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to another model");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = std::mem::take(&mut p.grad);
            for i in 0..p.value.len() {
                let g = grad.get(i).copied().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.value[i] -= lr * (update + self.weight_decay * p.value[i]);
            }
            p.grad = grad;
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total <= 1 {
        return base;
    }
    let t = step as f32 / total as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    /// Finite-difference check of a scalar function of one parameter vector.
    fn fd_check(
        value: &mut Vec<f32>,
        analytic: &[f32],
        mut f: impl FnMut(&[f32]) -> f64,
        tol: f64,
    ) {
        let eps = 1e-2f32;
        for i in (0..value.len()).step_by((value.len() / 17).max(1)) {
            let orig = value[i];
            value[i] = orig + eps;
            let up = f(value);
            value[i] = orig - eps;
            let down = f(value);
            value[i] = orig;
            let num = (up - down) / (2.0 * eps as f64);
            let a = analytic[i] as f64;
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-2);
            assert!(err < tol, "index {i}: analytic {a}, numeric {num}");
        }
    }

    fn random_tensor(c: usize, n: usize, l: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(&[seed]);
        Tensor::from_vec(
            (0..c * n * l).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c,
            n,
            l,
        )
    }

    /// Weighted sum of outputs so every output gradient is distinct.
    fn probe_weights(len: usize) -> Vec<f32> {
        (0..len).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.4).collect()
    }

    fn weighted(y: &Tensor, w: &[f32]) -> f64 {
        y.data.iter().zip(w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn conv_output_length() {
        let mut rng = rng_from(&[0]);
        let c = Conv1d::new(2, 4, 100, 20, 0, &mut rng);
        assert_eq!(c.out_len(1000), Some(46));
        assert_eq!(c.out_len(99), None);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rng_from(&[1]);
        let conv = Conv1d::new(2, 3, 3, 2, 1, &mut rng);
        let x = random_tensor(2, 2, 7, 2);
        let y = conv.infer(&x);
        assert_eq!((y.c, y.n, y.l), (3, 2, 4));
        for co in 0..3 {
            for b in 0..2 {
                for t in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for kk in 0..3 {
                            let pos = (t * 2 + kk) as isize - 1;
                            if (0..7).contains(&pos) {
                                acc += conv.weight.value[(co * 2 + ci) * 3 + kk]
                                    * x.data[(ci * 2 + b) * 7 + pos as usize];
                            }
                        }
                    }
                    assert!((acc - y.data[(co * 2 + b) * 4 + t]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = rng_from(&[3]);
        let mut conv = Conv1d::new(2, 3, 3, 2, 1, &mut rng);
        let mut x = random_tensor(2, 2, 9, 4);
        let y = conv.forward(&x);
        let w = probe_weights(y.data.len());
        let dy = Tensor::from_vec(w.clone(), y.c, y.n, y.l);
        conv.zero_grad();
        let dx = conv.backward(&dy, true).unwrap();
        let grad = conv.weight.grad.clone();
        let mut weights = conv.weight.value.clone();
        fd_check(
            &mut weights,
            &grad,
            |v| {
                let mut c2 = conv.clone();
                c2.weight.value = v.to_vec();
                weighted(&c2.infer(&x), &w)
            },
            1e-3,
        );
        let shape = (x.c, x.n, x.l);
        let mut xd = x.data.clone();
        fd_check(
            &mut xd,
            &dx.data,
            |v| {
                let xt = Tensor::from_vec(v.to_vec(), shape.0, shape.1, shape.2);
                weighted(&conv.infer(&xt), &w)
            },
            1e-3,
        );
        x.data = xd;
    }

    #[test]
    fn linear_gradients() {
        let mut rng = rng_from(&[5]);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = random_tensor(4, 5, 1, 6);
        let y = lin.forward(&x);
        let w = probe_weights(y.data.len());
        lin.zero_grad();
        let dx = lin.backward(&Tensor::from_vec(w.clone(), 3, 5, 1));
        let mut wv = lin.weight.value.clone();
        let gw = lin.weight.grad.clone();
        fd_check(
            &mut wv,
            &gw,
            |v| {
                let mut l2 = lin.clone();
                l2.weight.value = v.to_vec();
                weighted(&l2.infer(&x), &w)
            },
            1e-3,
        );
        let mut xd = x.data.clone();
        fd_check(
            &mut xd,
            &dx.data,
            |v| weighted(&lin.infer(&Tensor::from_vec(v.to_vec(), 4, 5, 1)), &w),
            1e-3,
        );
    }

    #[test]
    fn batch_norm_gradients() {
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, -0.2];
        let x = random_tensor(3, 4, 5, 7);
        let y = bn.forward(&x);
        let w = probe_weights(y.data.len());
        let dx = bn.backward(&Tensor::from_vec(w.clone(), 3, 4, 5));
        let mut xd = x.data.clone();
        fd_check(
            &mut xd,
            &dx.data,
            |v| weighted(&bn.clone().forward(&Tensor::from_vec(v.to_vec(), 3, 4, 5)), &w),
            2e-2,
        );
    }

    #[test]
    fn batch_norm_training_output_is_standardized() {
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&random_tensor(2, 8, 3, 9));
        for c in 0..2 {
            let s = &y.data[c * 24..(c + 1) * 24];
            let mean: f32 = s.iter().sum::<f32>() / 24.0;
            let var: f32 = s.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 24.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn l2_normalize_gradients() {
        let x = random_tensor(4, 3, 1, 10);
        let (y, norms) = l2_normalize(&x);
        for b in 0..3 {
            let n: f32 = (0..4).map(|c| y.at(c, b).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let w = probe_weights(12);
        let dx = l2_normalize_backward(&Tensor::from_vec(w.clone(), 4, 3, 1), &y, &norms);
        let mut xd = x.data.clone();
        fd_check(
            &mut xd,
            &dx.data,
            |v| weighted(&l2_normalize(&Tensor::from_vec(v.to_vec(), 4, 3, 1)).0, &w),
            1e-2,
        );
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = random_tensor(4, 3, 1, 11);
        let (loss, g) = softmax_cross_entropy(&logits, &[0, 3, 1]);
        assert!(loss > 0.0);
        for b in 0..3 {
            let s: f32 = (0..4).map(|c| g.at(c, b)).sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn rows_roundtrip() {
        let t = random_tensor(3, 4, 1, 12);
        assert_eq!(Tensor::from_rows(&t.to_rows(), 4, 3), t);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = Param::new(vec![2], vec![1.0, -1.0]);
        p.grad = vec![1.0, -1.0];
        let mut opt = AdamW::new(0.0);
        opt.step(vec![&mut p], 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-5);
        assert!((p.value[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-6);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-6);
    }
}
