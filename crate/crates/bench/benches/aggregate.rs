use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use segens_core::aggregate::{greedy_match, hungarian_match, mask_distance_matrix, RunningAggregate};
use segens_core::synth::{gen_scene, perturb_sample, Noise, SceneConfig};

fn members(n: usize) -> Vec<segens_core::SampleTensor> {
    let config = SceneConfig {
        height: 128,
        width: 128,
        n_objects: 5,
        ..SceneConfig::default()
    };
    let ideal = gen_scene(1, &config).unwrap().ideal_sample();
    let noise = Noise {
        logit_sigma: 1.0,
        jitter: 1,
        shuffle: true,
    };
    (0..n).map(|i| perturb_sample(&ideal, i as u64, &noise).0).collect()
}

fn fold(c: &mut Criterion) {
    let samples = members(2);
    c.bench_function("fold_sample 128x128 P=8", |b| {
        b.iter_batched(
            || (RunningAggregate::new(&samples[0]), samples[1].clone()),
            |(mut agg, next)| black_box(agg.fold_sample(next, &mut []).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn matching(c: &mut Criterion) {
    let samples = members(2);
    let d = mask_distance_matrix(&samples[0], &samples[1]).unwrap();
    c.bench_function("mask_distance_matrix 128x128 P=8", |b| {
        b.iter(|| black_box(mask_distance_matrix(&samples[0], &samples[1]).unwrap()))
    });
    c.bench_function("greedy_match P=8", |b| b.iter(|| black_box(greedy_match(&d))));
    c.bench_function("hungarian_match P=8", |b| b.iter(|| black_box(hungarian_match(&d))));
}

criterion_group!(benches, fold, matching);
criterion_main!(benches);
