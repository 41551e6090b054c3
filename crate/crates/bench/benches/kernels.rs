use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pbnet_bench::{ellipse, image_batch, smooth_map};
use pbnet_core::metrics::hausdorff;
use pbnet_core::morphology::{boundary_band, boundary_confidence, dilate};
use pbnet_core::network::build_cpu;
use pbnet_core::nn::Ctx;
use pbnet_core::{Config, MorphKernel};

fn morphology(c: &mut Criterion) {
    let p = smooth_map(256, 256);
    let mut g = c.benchmark_group("morphology_256");
    for k in [3, 13] {
        let kernel = MorphKernel::new(k).unwrap();
        g.bench_with_input(BenchmarkId::new("dilate", k), &kernel, |b, k| {
            b.iter(|| dilate(&p, *k).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("boundary_band", k), &kernel, |b, k| {
            b.iter(|| boundary_band(&p, *k).unwrap())
        });
    }
    let (ke, kd) = (MorphKernel::new(3).unwrap(), MorphKernel::new(5).unwrap());
    g.bench_function("boundary_confidence", |b| {
        b.iter(|| boundary_confidence(&p, ke, kd).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let pred = ellipse(256, 256, 120.0, 130.0, 60.0, 45.0);
    let truth = ellipse(256, 256, 128.0, 128.0, 55.0, 50.0);
    c.bench_function("hausdorff_256", |b| b.iter(|| hausdorff(&pred, &truth).unwrap()));
}

fn forward(c: &mut Criterion) {
    let net = build_cpu(Config::tiny().model, 0).unwrap();
    let mut g = c.benchmark_group("tiny_forward");
    g.sample_size(10);
    for (h, w) in [(64, 64), (256, 256)] {
        let x = image_batch(1, h, w);
        g.bench_function(format!("{h}x{w}"), |b| {
            b.iter(|| net.forward(&Ctx::eval(), &x).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, morphology, metrics, forward);
criterion_main!(benches);
