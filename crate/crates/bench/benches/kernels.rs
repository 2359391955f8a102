use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rfctl_core::augment::make_pair;
use rfctl_core::dataio::IqFrame;
use rfctl_core::encoder::{frames_to_tensor, Encoder};
use rfctl_core::loss::{snn_loss_with_grad, ContrastiveBatch, DEFAULT_TAU};
use rfctl_core::rng::rng_from;
use rfctl_core::synthrf::{sample_device_profiles, synthesize_capture, DomainProfile};
use rfctl_core::{AugmentConfig, EncoderConfig};

fn unit_rows(n: usize, dim: usize, phase: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * dim).map(|i| (i as f64 * 0.37 + phase).sin()).collect();
    for row in v.chunks_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn frame(width: usize, index: usize) -> IqFrame {
    let data = (0..2 * width).map(|i| ((i * 7 + index) as f32 * 0.05).cos()).collect();
    IqFrame::new(data, width, index).unwrap()
}

fn loss(c: &mut Criterion) {
    let mut g = c.benchmark_group("snn_loss_with_grad");
    for n in [64, 256] {
        let q = unit_rows(n, 128, 0.0);
        let k = unit_rows(n, 128, 1.0);
        let y: Vec<u64> = (0..n as u64).map(|i| i % 16).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            let batch = ContrastiveBatch::new(&q, &k, &y, 128, DEFAULT_TAU).unwrap();
            b.iter(|| snn_loss_with_grad(black_box(&batch)).unwrap())
        });
    }
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::desk();
    let enc = Encoder::new(&cfg, &mut rng_from(&[1]));
    let frames: Vec<IqFrame> = (0..32).map(|i| frame(cfg.window, i)).collect();
    let x = frames_to_tensor(&frames.iter().collect::<Vec<_>>()).unwrap();
    c.bench_function("encoder_infer_32x1000", |b| b.iter(|| enc.infer(black_box(&x)).unwrap()));
    let mut train = enc.clone();
    c.bench_function("encoder_forward_backward_32x1000", |b| {
        b.iter(|| {
            let z = train.forward(black_box(&x)).unwrap();
            train.backward(&z);
        })
    });
}

fn augment(c: &mut Criterion) {
    let f = frame(1000, 0);
    let cfg = AugmentConfig::default();
    let mut rng = rng_from(&[2]);
    c.bench_function("make_pair_1000", |b| b.iter(|| make_pair(black_box(&f), 0, &cfg, &mut rng).unwrap()));
}

fn synth(c: &mut Criterion) {
    let dev = &sample_device_profiles(2, 0).unwrap()[0];
    let day = DomainProfile::identity(0);
    c.bench_function("synthesize_capture_100k", |b| {
        b.iter(|| synthesize_capture(black_box(dev), &day, 100_000, 45e6, 3).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = loss, encoder, augment, synth
}
criterion_main!(benches);
