use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vidsal::{Tape, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).unwrap()
}

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (cin, cout, side) in [(1, 8, 32), (8, 16, 16), (32, 32, 4)] {
        let x = ramp(&[1, cin, side, side]).with_requires_grad(true);
        let k = ramp(&[cout, cin, 3, 3]).with_requires_grad(true);
        let b = ramp(&[cout]).with_requires_grad(true);
        let id = format!("{cin}x{side}x{side}->{cout}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |bch, _| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (xv, kv, bv) = (t.leaf(&x), t.leaf(&k), t.leaf(&b));
                black_box(t.conv2d(xv, kv, Some(bv), 1, 1).unwrap());
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |bch, _| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (xv, kv, bv) = (t.leaf(&x), t.leaf(&k), t.leaf(&b));
                let y = t.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
                let l = t.sum(y);
                t.backward(l).unwrap();
                black_box(t.grad(kv).map(|g| g[0]));
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv2d);
criterion_main!(benches);
