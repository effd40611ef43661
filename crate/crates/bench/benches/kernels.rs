use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hsivar_core::numerics::{ConvSpec, Rng, Tape, Tensor};
use std::hint::black_box;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_fwd_bwd");
    let mut rng = Rng::new(0);
    for n in [64usize, 128, 256] {
        let (a, b) = (randn(&[n, n], &mut rng), randn(&[n, n], &mut rng));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (av, bv) = (t.leaf(a.clone(), true), t.leaf(b.clone(), true));
                let y = t.matmul(av, bv).unwrap();
                let s = t.sum(y);
                black_box(t.backward(s).unwrap());
            })
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = randn(&[4, 32, 32, 32], &mut rng);
    let w = randn(&[32, 32, 3, 3], &mut rng);
    let dw = randn(&[64, 1, 3, 3], &mut rng);
    let xd = randn(&[1, 64, 32, 32], &mut rng);
    c.bench_function("conv3x3_32ch_fwd_bwd", |bch| {
        bch.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.leaf(w.clone(), true));
            let y = t.conv2d(xv, wv, None, ConvSpec::same(3)).unwrap();
            let s = t.sum(y);
            black_box(t.backward(s).unwrap());
        })
    });
    c.bench_function("depthwise3x3_64ch_fwd_bwd", |bch| {
        bch.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(xd.clone()), t.leaf(dw.clone(), true));
            let y = t.conv2d(xv, wv, None, ConvSpec::same(3).with_groups(64)).unwrap();
            let s = t.sum(y);
            black_box(t.backward(s).unwrap());
        })
    });
}

criterion_group!(benches, matmul, conv);
criterion_main!(benches);
