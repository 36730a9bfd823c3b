use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use kino_core::checks::random_scan_inputs;
use kino_core::cost::attention_reference;
use kino_core::kpe::{correlation_scores, normalize_channels, to_grid, variation_signals, KpeConfig};
use kino_core::ks4::{scan_parallel, scan_sequential};
use kino_core::synth::{generate_dataset, SyntheticVideoSpec, TaskMode};
use kino_core::vit::{VitConfig, VitModel};
use kino_core::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan");
    for t in [128usize, 256, 512, 1024] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let (inputs, d) = random_scan_inputs::<f32>(16, t, 8, 16, &mut rng).unwrap();
        g.throughput(Throughput::Elements(t as u64));
        g.bench_with_input(BenchmarkId::new("sequential", t), &t, |b, _| {
            b.iter(|| scan_sequential(black_box(&inputs), &d).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("parallel", t), &t, |b, _| {
            b.iter(|| scan_parallel(black_box(&inputs), &d).unwrap())
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_ref");
    g.sample_size(10);
    for t in [128usize, 256, 512] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let x = Tensor::<f32>::uniform([3, t, 32], 1.0, &mut rng).unwrap();
        let (q, rest) = x.data().split_at(t * 32);
        let (k, v) = rest.split_at(t * 32);
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| attention_reference(black_box(q), k, v, t, 32))
        });
    }
    g.finish();
}

fn kpe(c: &mut Criterion) {
    let mut g = c.benchmark_group("kpe");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::uniform([2, 8, 64, 32], 1.0, &mut rng).unwrap();
    let grid = to_grid(&x, 8, 8).unwrap();
    let normed = normalize_channels(&grid, 1e-6).unwrap();
    let cfg = KpeConfig { window_radius: 2, ..KpeConfig::default() };
    g.bench_function("correlation", |b| b.iter(|| correlation_scores(black_box(&normed), &cfg).unwrap()));
    g.bench_function("variation", |b| b.iter(|| variation_signals(black_box(&grid), &cfg).unwrap()));
    g.finish();
}

fn tiny_model(c: &mut Criterion) {
    let mut g = c.benchmark_group("tiny_vit");
    g.sample_size(10);
    let spec = SyntheticVideoSpec { seed: 3, ..Default::default() };
    let ds = generate_dataset(&spec, TaskMode::Motion, 32).unwrap();
    let (clips, _) = ds.batch(&(0..32).collect::<Vec<_>>()).unwrap();
    for pks4 in [false, true] {
        let cfg = VitConfig { width: 32, depth: 2, heads: 2, mlp_ratio: 2, insert_after: 1, pks4_enabled: pks4, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let model = VitModel::new(&mut store, &cfg, 1).unwrap();
        let name = if pks4 { "with_pks4" } else { "baseline" };
        g.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let y = model.forward(&tape, &store, black_box(&clips)).unwrap();
                tape.gradients(y.sum().unwrap()).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, scan, attention, kpe, tiny_model);
criterion_main!(benches);
