//! Sequential versus data-parallel execution of the three batch-level hot paths:
//! the similarity matrix, the per-row batch gradient and whole-split ranking.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use logan_core::data::{manifest_for, synthesize, Dataset, Split, SyntheticSpec};
use logan_core::eval::SpanScore;
use logan_core::harness::rank_dataset;
use logan_core::loss::{batch_gradient, similarity_matrix, LossConfig, Pair};
use logan_core::model::{init_params, ModelConfig, ModelDims};
use logan_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn setup() -> (ModelConfig, SyntheticSpec) {
    let spec = SyntheticSpec { train_videos: 16, test_videos: 16, ..SyntheticSpec::default() };
    let model = ModelConfig {
        dims: ModelDims { vocab: spec.vocab_size, word_embed: 16, hidden: 32, pe_dim: 8, feature_dim: spec.feature_dim, visual_out: None },
        ..ModelConfig::default()
    };
    (model, spec)
}

fn batch(c: &mut Criterion) {
    let (model, spec) = setup();
    let data = synthesize(&spec).unwrap();
    let params = init_params(&model, 0);
    let pairs: Vec<Pair> = data.train.iter().map(|v| (&v.features, &v.query)).collect();
    let loss = LossConfig { batch_videos: pairs.len(), ..LossConfig::default() };

    let mut g = c.benchmark_group("similarity_matrix_16x16");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| similarity_matrix(black_box(&params), &model, &pairs, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("batch_gradient_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(black_box(&params), &model, &loss, &pairs, exec).unwrap())
        });
    }
    g.finish();
}

fn ranking(c: &mut Criterion) {
    let (model, spec) = setup();
    let data = synthesize(&spec).unwrap();
    let params = init_params(&model, 0);
    let manifest = manifest_for(&spec, Split::Test, &data.test);
    let split = Dataset::from_parts(manifest, data.test.iter().map(|v| v.features.clone()).collect());

    let mut g = c.benchmark_group("rank_dataset_16");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rank_dataset(black_box(&params), &model, &split, SpanScore::default(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch, ranking);
criterion_main!(benches);
