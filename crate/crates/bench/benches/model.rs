use criterion::{black_box, criterion_group, criterion_main, Criterion};

use gummp::params::Session;
use gummp::training::{loss_and_grads, train_step};
use gummp::Ablation;
use gummp_bench::fixture;

fn encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    for ablation in Ablation::ALL {
        let f = fixture(ablation);
        let ex = &f.prepared[0];
        group.bench_function(ablation.label(), |b| {
            b.iter(|| {
                let mut s = Session::new(&f.trainer.model.store, false);
                black_box(f.trainer.model.encode(&mut s, ex).unwrap());
            })
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let f = fixture(Ablation::Full);
    let ex = &f.prepared[0];
    let model = &f.trainer.model;
    c.bench_function("decode/greedy_10", |b| b.iter(|| black_box(model.greedy(ex, 10).unwrap())));
    c.bench_function("decode/beam4_10", |b| b.iter(|| black_box(model.beam(ex, 4, 10).unwrap())));
}

fn train(c: &mut Criterion) {
    let f = fixture(Ablation::Full);
    c.bench_function("train/loss_and_grads", |b| {
        b.iter(|| black_box(loss_and_grads(&f.trainer.model, &f.prepared[0]).unwrap()))
    });
    let batch = f.prepared[..8].to_vec();
    let mut trainer = f.trainer.clone();
    let clip = trainer.train.clip_norm;
    c.bench_function("train/step_batch8", |b| {
        b.iter(|| black_box(train_step(&mut trainer.model, &mut trainer.adam, &batch, clip).unwrap()))
    });
}

criterion_group!(benches, encode, decode, train);
criterion_main!(benches);
