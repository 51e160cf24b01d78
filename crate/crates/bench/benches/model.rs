use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mrtnet_bench::{distribution, model_fixture};
use mrtnet_core::losses::{ssim_loss, LossConfig};
use mrtnet_core::mrt::TemporalMap;
use mrtnet_core::nn::Ctx;
use mrtnet_core::predictor::joint_argmax;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let cfg = LossConfig::default();
    for (n, d) in [(64, 32), (64, 128)] {
        let (net, store, sample) = model_fixture(n, d);
        group.bench_with_input(BenchmarkId::new("n_d", format!("{n}_{d}")), &(), |b, _| {
            b.iter(|| {
                let mut cx = Ctx::new(&store, true);
                let out = net.forward(&mut cx, &sample.video, &sample.mask, &sample.query).unwrap();
                let loss = net.loss(&mut cx, &out, &sample.gt_maps, sample.label, &cfg).unwrap();
                black_box(cx.g.backward(loss.total).unwrap());
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (net, store, sample) = model_fixture(64, 32);
    c.bench_function("predict_n64_d32", |b| {
        b.iter(|| {
            let mut cx = Ctx::new(&store, false);
            black_box(net.forward(&mut cx, &sample.video, &sample.mask, &sample.query).unwrap());
        })
    });
    let mut group = c.benchmark_group("joint_argmax");
    for n in [64usize, 128, 512] {
        let ps = distribution(n, n / 3);
        let pe = distribution(n, 2 * n / 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| joint_argmax(black_box(&ps), black_box(&pe)).unwrap())
        });
    }
    group.finish();
}

fn losses(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let s = TemporalMap::new(distribution(128, 40).iter().map(|x| x * 3.0).collect());
    let g = TemporalMap::new((0..128).map(|i| f64::from(u8::from((30..60).contains(&i)))).collect());
    c.bench_function("ssim_loss_n128", |b| b.iter(|| ssim_loss(black_box(&s), black_box(&g), &cfg).unwrap()));
}

criterion_group!(benches, forward_backward, inference, losses);
criterion_main!(benches);
