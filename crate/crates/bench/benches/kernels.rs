use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use headlab::attention::{attention_map, perturb_map};
use headlab::sampler::{sample, GuidanceConfig};
use headlab::tensor::{matmul, softmax_rows};
use headlab::train::{draw_items, loss_and_grad};
use headlab::{data, dit_forward, DitConfig, DitWeights, HeadId, PerturbMethod, PerturbSpec, Rng, Tensor};

fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(&[r, c], rng.normals(r * c)).unwrap()
}

fn tensor_kernels(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let a = random(&mut rng, 65, 64);
    let b = random(&mut rng, 64, 256);
    c.bench_function("matmul 65x64x256", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
    let logits = random(&mut rng, 65, 65);
    c.bench_function("softmax_rows 65x65", |bch| bch.iter(|| softmax_rows(black_box(&logits))));
}

fn attention_kernels(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let q = random(&mut rng, 65, 16);
    let k = random(&mut rng, 65, 16);
    let a = attention_map(&q, &k).unwrap();
    let mut group = c.benchmark_group("perturb_map");
    for method in [
        PerturbMethod::SoftPag,
        PerturbMethod::SoftUniform,
        PerturbMethod::SoftSeg,
        PerturbMethod::Temperature,
        PerturbMethod::SoftMaxGuidance,
    ] {
        group.bench_function(method.name(), |bch| {
            bch.iter(|| perturb_map(method, 0.5, 0.5, black_box(&a), &q, &k).unwrap())
        });
    }
    group.finish();
}

fn model_kernels(c: &mut Criterion) {
    let cfg = DitConfig::default();
    let w = DitWeights::init_dense_output(&cfg, 2).unwrap();
    let x = Tensor::new(&[16, 16], Rng::new(3).normals(256)).unwrap();
    let none = PerturbSpec::none();
    let spec = PerturbSpec::with_method([HeadId::new(1, 0), HeadId::new(2, 3)], PerturbMethod::Pag).unwrap();
    c.bench_function("dit_forward", |bch| bch.iter(|| dit_forward(&w, black_box(&x), 0.5, Some(1), &none).unwrap()));
    c.bench_function("dit_forward perturbed", |bch| {
        bch.iter(|| dit_forward(&w, black_box(&x), 0.5, Some(1), &spec).unwrap())
    });

    let batch = data::dataset(8, 0, false).unwrap();
    let items = draw_items(&batch, 0.1, &mut Rng::new(4));
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("loss_and_grad batch 8", |bch| bch.iter(|| loss_and_grad(&w, black_box(&items)).unwrap()));
    group.finish();

    let g = GuidanceConfig {
        cond: Some(0),
        ..GuidanceConfig::default()
    };
    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    group.bench_function("sample 20 steps pag", |bch| bch.iter(|| sample(&w, black_box(&g), &spec).unwrap()));
    group.finish();
}

criterion_group!(benches, tensor_kernels, attention_kernels, model_kernels);
criterion_main!(benches);
