use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use keystep_bench::{model, scenes};
use keystep_core::inference::forecast;
use keystep_core::trainer::batch_gradients;
use keystep_core::HeadKind;

fn decode(c: &mut Criterion) {
    let (m, _) = model(0).unwrap();
    let set = scenes(4, 1).unwrap();
    let scene = &set.scenes[0];
    let mut g = c.benchmark_group("forecast");
    for (name, head, prune) in [
        ("g2l_pruned", HeadKind::G2l, true),
        ("g2l_exhaustive", HeadKind::G2l, false),
        ("simultaneous", HeadKind::Simultaneous, true),
        ("recursive", HeadKind::Recursive, true),
    ] {
        g.bench_function(name, |b| b.iter(|| forecast(&m, black_box(scene), head, prune).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let (m, tc) = model(0).unwrap();
    let set = scenes(16, 2).unwrap();
    let batch: Vec<_> = set.scenes.iter().take(tc.batch_size).collect();
    c.bench_function("batch_gradients_64", |b| {
        b.iter_batched(|| batch.clone(), |bt| batch_gradients(&m, &tc, &bt).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, decode, train_step);
criterion_main!(benches);
