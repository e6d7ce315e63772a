//! Hot kernels under the active execution mode.
//!
//! `cargo bench -p tally-core` measures the rayon build and
//! `cargo bench -p tally-core --no-default-features` the sequential one; the
//! mode is part of each benchmark id so criterion keeps both baselines apart.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tally_core::evaluation::{evaluate, Protocol};
use tally_core::network::{Network, NetworkConfig};
use tally_core::synthdata::{generate, DatasetSpec};
use tally_core::training::dataset_logits;
use tally_core::{Tape, Tensor};

const MODE: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[32, 8, 12, 12], &mut rng);
    let k = random(&[8, 8, 3, 3], &mut rng);
    c.bench_function(&format!("conv2d_fwd_bwd/{MODE}"), |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let kv = tape.param(k.clone());
            let y = tape.conv2d(xv, kv).unwrap();
            let loss = tape.sum(y);
            tape.backward(loss).unwrap();
            tape.grad(kv)
        })
    });
}

fn inference(c: &mut Criterion) {
    let spec = DatasetSpec::new(10, 4);
    let splits = generate(&spec).unwrap();
    let net = Network::init(NetworkConfig::new(spec.channels, spec.num_classes), 0).unwrap();
    let counts = splits.train.class_totals();
    let mut group = c.benchmark_group("inference");
    group.sample_size(20);
    group.bench_with_input(BenchmarkId::new("dataset_logits", MODE), &splits.test, |b, data| {
        b.iter(|| dataset_logits(&net, data).unwrap())
    });
    group.bench_with_input(BenchmarkId::new("evaluate", MODE), &splits.test, |b, data| {
        b.iter(|| evaluate(&net, data, Protocol::Subpopulation, &counts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, inference);
criterion_main!(benches);
