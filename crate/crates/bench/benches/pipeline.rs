use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use gol_core::config::PipelineConfig;
use gol_core::evaluation::dice_score;
use gol_core::occlusion::occlude_sequence;
use gol_core::pipeline::TrainedPipeline;
use gol_core::pose_graph::{map_frames, DistanceMatrix, StateTransitionModel};
use gol_core::recognizer::compute_gei;
use gol_core::synth::{generate_corpus, CorpusSpec};

const SMALL: &str = "\
geometry.width = 32
geometry.height = 32
keypose.pca_dim = 16
cvae.d_z = 16
cvae.channels = 8,16,32
cvae.cond_width = 16
cvae.dense_width = 64
cvae.epochs = 1
bilstm.hidden = 32
bilstm.epochs = 1
geinet.epochs = 2
";

fn bench(c: &mut Criterion) {
    let cfg = PipelineConfig::from_text(SMALL).unwrap();
    let corpus = generate_corpus(&CorpusSpec {
        subjects: 4,
        sequences_per_subject: 2,
        frames: 100,
        noise_rate: 0.01,
        geometry: cfg.geometry,
        seed: 0,
    })
    .unwrap();
    let (pipeline, _) = TrainedPipeline::train(&corpus, &corpus, &cfg).unwrap();
    let probe = occlude_sequence(&corpus[1], 0.5, 1).unwrap();

    let rows: Vec<Vec<f64>> = (0..100)
        .map(|i| (0..17).map(|j| ((i * 31 + j * 17) % 23) as f64).collect())
        .collect();
    let matrix = DistanceMatrix::from_rows(rows).unwrap();
    let model = StateTransitionModel::new(16).unwrap();
    c.bench_function("map_frames 100x17", |b| b.iter(|| map_frames(black_box(&matrix), &model).unwrap()));

    let (a, bf) = (&corpus[0].frames()[0], &corpus[0].frames()[5]);
    c.bench_function("dice 32x32", |b| b.iter(|| dice_score(black_box(a), black_box(bf)).unwrap()));
    c.bench_function("gei 100 frames", |b| b.iter(|| compute_gei(black_box(&corpus[0])).unwrap()));
    c.bench_function("identify occluded probe", |b| {
        b.iter(|| pipeline.identify(black_box(&probe)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
