//! Independent reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfctl_core::dataio::{build_capture_set, CaptureSet, TransmissionIdAllocator};
use rfctl_core::synthrf::RawCapture;
use rfctl_core::EncoderConfig;
use num_complex::Complex32;

/// Soft nearest-neighbor loss by direct summation, no log-sum-exp tricks.
pub fn oracle_snn(q: &[f64], k: &[f64], y: &[u64], dim: usize, tau: f64) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            let mut d2 = 0.0;
            for t in 0..dim {
                let diff = q[i * dim + t] - k[j * dim + t];
                d2 += diff * diff;
            }
            let e = (-d2 / tau).exp();
            den += e;
            if y[j] == y[i] {
                num += e;
            }
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` rows of unit-norm `dim`-vectors.
pub fn unit_rows(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn labels(rng: &mut impl Rng, n: usize, classes: u64) -> Vec<u64> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Five-point central-difference gradient of `f` at `x`, written out
/// independently of the library harness.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = p[i];
        let mut at = |h: f64| {
            p[i] = v + h;
            f(&p)
        };
        let (a, b, c, d) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        p[i] = v;
        g.push((-a + 8.0 * b - 8.0 * c + d) / (12.0 * eps));
    }
    g
}

/// Max relative error with an absolute floor below which differences are
/// attributed to finite-difference rounding.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Raw captures whose samples encode `(device, day, index)`, so any slice
/// can be checked against its origin.
pub fn indexed_captures(devices: usize, day: usize, len: usize) -> Vec<RawCapture> {
    (0..devices)
        .map(|d| RawCapture {
            device_id: d,
            day_id: day,
            samples: (0..len)
                .map(|n| Complex32::new(n as f32, (d * 10 + day) as f32 + 0.5))
                .collect(),
            sample_rate_hz: 45e6,
        })
        .collect()
}

pub fn set_from(caps: &[RawCapture], set: usize, offset: usize, f: usize, w: usize, ids: &mut TransmissionIdAllocator) -> CaptureSet {
    build_capture_set(caps, set, offset, f, w, ids).unwrap()
}

/// A small encoder that keeps the desk structure but runs in milliseconds.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        window: 200,
        first_conv_kernel: 20,
        first_conv_stride: 4,
        projector_hidden: 32,
        predictor_hidden: 32,
        stage_widths: vec![4, 8],
        blocks_per_stage: 1,
        ..EncoderConfig::default()
    }
}
