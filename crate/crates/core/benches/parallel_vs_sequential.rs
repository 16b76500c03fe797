use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchprompt::config::RunConfig;
use sketchprompt::data::{scan_dataset, SupportFile};
use sketchprompt::embedding::Embedder;
use sketchprompt::exec::Exec;
use sketchprompt::graph::Mat;
use sketchprompt::model::Model;
use sketchprompt::retrieval::category_metrics;
use sketchprompt::synth::{generate, SynthSpec};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, cols) = (200, 2000);
    let d = Mat::from_shape_simple_fn((rows, cols), || rng.random::<f64>());
    let gallery: Vec<usize> = (0..cols).map(|j| j % 20).collect();
    let queries: Vec<usize> = (0..rows).map(|i| i % 20).collect();
    let mut group = c.benchmark_group("category_metrics");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| category_metrics(&d, &queries, &gallery, exec).unwrap())
        });
    }
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &SynthSpec::default()).unwrap();
    let catalog = scan_dataset(dir.path(), None, true).unwrap();
    let cats = catalog.categories();
    let model = Model::build(&RunConfig::toy().model().unwrap()).unwrap();
    let support = SupportFile::select(&catalog, &cats, 0).unwrap();
    let mut group = c.benchmark_group("fine_grained_embedding");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                Embedder::new(&model, &catalog, exec)
                    .fine_grained(&cats, Some(&support), false)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, metrics, embedding);
criterion_main!(benches);
