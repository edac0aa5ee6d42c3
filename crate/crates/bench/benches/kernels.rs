use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hcd_bench::{fixture, image_pyramid};
use hcd_core::data::HazePair;
use hcd_core::kernels::{conv2d, deform_conv2d, resize_bilinear};
use hcd_core::losses::{hcl_loss_with_grad, PerceptualEncoder};
use hcd_core::network::{Hdn, ModelConfig, SAME_REFLECT};
use hcd_core::train::{TrainConfig, TrainState, Trainer};
use hcd_core::Shape;

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernels");
    for width in [8usize, 32] {
        let x = fixture(Shape::new(1, width, 64, 64), -1.0, 1.0, 1);
        let w = fixture(Shape::new(width, width, 3, 3), -0.1, 0.1, 2);
        g.bench_with_input(BenchmarkId::new("conv3x3_64px", width), &width, |b, _| {
            b.iter(|| conv2d(&x, &w, None, SAME_REFLECT))
        });
        let off = fixture(Shape::new(1, 18, 64, 64), -1.5, 1.5, 3);
        g.bench_with_input(BenchmarkId::new("deform3x3_64px", width), &width, |b, _| {
            b.iter(|| deform_conv2d(&x, &off, &w, None))
        });
    }
    let img = fixture(Shape::new(1, 3, 120, 120), 0.0, 1.0, 4);
    g.bench_function("resize_120_to_240", |b| b.iter(|| resize_bilinear(&img, 240, 240)));
    g.finish();
}

fn losses(c: &mut Criterion) {
    let a = image_pyramid(2, 64, 10);
    let p = image_pyramid(2, 64, 20);
    let n = image_pyramid(2, 64, 30);
    let mut g = c.benchmark_group("hcl_with_grad_64px");
    for (name, enc) in [("identity", PerceptualEncoder::identity()), ("random-tiny", PerceptualEncoder::random_tiny(0))] {
        g.bench_function(name, |b| b.iter(|| hcl_loss_with_grad(&enc, &a, &p, &n).unwrap()));
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    let toy = Hdn::new(ModelConfig::toy(8, 1)).unwrap();
    let full = Hdn::new(ModelConfig::default()).unwrap();
    let x = fixture(Shape::new(1, 3, 64, 64), 0.0, 1.0, 40);
    let (wt, wf) = (toy.init_weights(), full.init_weights());
    g.bench_function("dehaze_64px_toy", |b| b.iter(|| toy.dehaze(&wt, &x).unwrap()));
    g.bench_function("dehaze_64px_default", |b| b.iter(|| full.dehaze(&wf, &x).unwrap()));

    let pair = HazePair::new(x.clone(), fixture(x.shape(), 0.0, 1.0, 41)).unwrap();
    let cfg = TrainConfig {
        crop: 64,
        batch: 1,
        total_steps: u64::MAX,
        ..TrainConfig::default()
    };
    let enc = PerceptualEncoder::random_tiny(0);
    let trainer = Trainer {
        net: &toy,
        cfg: &cfg,
        encoder: Some(&enc),
    };
    let mut state = TrainState::new(wt.clone(), 0);
    g.bench_function("train_step_64px_toy", |b| {
        b.iter(|| trainer.step(&mut state, std::slice::from_ref(&pair)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, losses, network);
criterion_main!(benches);
