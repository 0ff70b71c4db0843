use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use stvad_bench::{memory_case, random_tensor, rng, small_run, wave_clips};
use stvad_core::data;
use stvad_core::graph::{ConvGeom, Graph};
use stvad_core::pipeline::{self, TrainState};
use stvad_core::Tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &(size, cin, cout) in &[(64, 1, 32), (32, 32, 64), (16, 64, 128)] {
        let mut r = rng(1);
        let x = random_tensor(&[4, size, size, cin], &mut r);
        let w = random_tensor(&[9 * cin, cout], &mut r);
        let b = random_tensor(&[cout], &mut r);
        let id = format!("{size}x{size}x{cin}->{cout}");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                black_box(g.conv2d(xv, wv, bv, ConvGeom::SAME3).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let wv = g.leaf(w.clone(), true);
                let bv = g.leaf(b.clone(), true);
                let y = g.conv2d(xv, wv, bv, ConvGeom::SAME3).unwrap();
                let zero = g.constant(Tensor::zeros(&[4, size, size, cout]));
                let loss = g.mse(y, zero, true).unwrap();
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn memory(c: &mut Criterion) {
    let mut group = c.benchmark_group("memory");
    for &(k, c_dim) in &[(256, 32), (64, 128), (16, 256)] {
        let (bank, q) = memory_case(k, 20, c_dim, 3);
        let id = format!("k{k}_c{c_dim}");
        group.bench_function(BenchmarkId::new("read", &id), |b| b.iter(|| black_box(bank.read(&q).unwrap())));
        group.bench_function(BenchmarkId::new("update", &id), |b| {
            b.iter(|| black_box(bank.updated(&q).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let run = small_run(32, vec![16, 32]);
    let clips = wave_clips(&run, 12);
    let refs: Vec<_> = clips.iter().take(4).collect();
    let batch = data::stack_clips(&refs).unwrap();
    let mut state = TrainState::new(run, 0).unwrap();
    c.bench_function("train_step/32x32_2lvl_b4", |b| {
        b.iter(|| black_box(pipeline::train_step(&mut state, &batch, 1e-4).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, memory, train_step
}
criterion_main!(benches);
