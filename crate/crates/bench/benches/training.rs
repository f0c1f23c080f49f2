use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hpgan_core::data::{synth_generate, AnomalyMix};
use hpgan_core::detection::anomaly_scores;
use hpgan_core::networks::build_models;
use hpgan_core::tensor::Adam;
use hpgan_core::training::{train_step, StepNoise};
use hpgan_core::{ModelConfig, NormStats, Sample, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normals(n: usize) -> Vec<Sample> {
    let ds = synth_generate(n, 0, 0, &AnomalyMix::default()).unwrap();
    let stats = NormStats::fit(&ds.samples).unwrap();
    ds.samples.iter().map(|s| stats.normalize(s)).collect()
}

fn step(c: &mut Criterion) {
    let samples = normals(32);
    let ts: Vec<Tensor> = samples.iter().map(Sample::to_tensor).collect();
    let xb = Tensor::stack(&ts.iter().collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, mh) in [("LM-GAN", false), ("LMMH-GAN", true)] {
        let config = ModelConfig { use_mh: mh, ..ModelConfig::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut models = build_models(&config, &mut rng).unwrap();
        let adam = Adam::new(config.learning_rate);
        group.bench_function(BenchmarkId::new("desk_batch32", name), |b| {
            b.iter(|| {
                let noise = StepNoise::draw(&models.config, 32, &mut rng);
                black_box(train_step(&mut models, &xb, &noise, &adam).unwrap());
            })
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let samples = normals(256);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models = build_models(&ModelConfig::desk(), &mut rng).unwrap();
    c.bench_function("anomaly_scores_256", |b| b.iter(|| anomaly_scores(&models, black_box(&samples)).unwrap()));
}

criterion_group!(benches, step, scoring);
criterion_main!(benches);
