use std::hint::black_box;

use aspdc_core::aspdc::{AspdcConfig, AspdcModule};
use aspdc_core::graph::Graph;
use aspdc_core::kernels::conv::ConvArgs;
use aspdc_core::metrics::ssim;
use aspdc_core::{Image, ParamStore, Shape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp(shape: Shape) -> Tensor<f32> {
    Tensor::from_fn(shape, |n, c, y, x| {
        ((n + 3 * c + 5 * y + 7 * x) % 17) as f32 / 17.0 - 0.5
    })
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(ch, side) in &[(8, 64), (32, 32)] {
        let x = ramp(Shape::new(1, ch, side, side));
        let w = ramp(Shape::new(ch, ch, 3, 3));
        group.bench_with_input(BenchmarkId::new(format!("c{ch}"), side), &side, |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                black_box(g.conv2d(xv, wv, None, ConvArgs::same(3, 1)).unwrap());
            })
        });
    }
    group.finish();
}

fn deform(c: &mut Criterion) {
    let mut group = c.benchmark_group("deform_conv2d");
    let (ch, side) = (32, 32);
    let x = ramp(Shape::new(1, ch, side, side));
    let w = ramp(Shape::new(ch, ch, 3, 3));
    let off = ramp(Shape::new(1, 18, side, side)).map(|v| 3.0 * v);
    let m = ramp(Shape::new(1, 9, side, side)).map(|v| v + 0.5);
    for d in [1, 4] {
        group.bench_with_input(BenchmarkId::new("forward_backward", d), &d, |b, &d| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.variable(x.clone());
                let wv = g.variable(w.clone());
                let ov = g.variable(off.clone());
                let mv = g.variable(m.clone());
                let y = g.deform_conv2d(xv, wv, None, Some(ov), mv, d).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap();
                black_box(g.grad(ov).is_some());
            })
        });
    }
    group.finish();
}

fn aspdc_module(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let width = 32;
    let module =
        AspdcModule::new(&mut store, &mut rng, "m", width, &AspdcConfig::default()).unwrap();
    let x = ramp(Shape::new(1, width, 16, 16));
    c.bench_function("aspdc_module_16x16_c32", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = g.bind(&store, false);
            let xv = g.constant(x.clone());
            black_box(module.forward(&mut g, &p, xv).unwrap().fused);
        })
    });
}

fn metrics(c: &mut Criterion) {
    let a = Image::from_fn(128, 128, |y, x, ch| {
        ((y * 7 + x * 3 + ch) % 23) as f32 / 23.0
    });
    let b = a.map(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0));
    c.bench_function("ssim_128x128", |bench| {
        bench.iter(|| black_box(ssim(&a, &b).unwrap()))
    });
}

criterion_group!(benches, conv, deform, aspdc_module, metrics);
criterion_main!(benches);
