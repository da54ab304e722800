use std::hint::black_box;

use attnpool::heads::LossKind;
use attnpool::sketch::sketch_inner_product_trials;
use attnpool::synth::{gen_planted, PlantedTaskConfig};
use attnpool::train::{batch_gradient, prepare_inputs, TrainConfig};
use attnpool::Execution;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn gradients(c: &mut Criterion) {
    let task = PlantedTaskConfig {
        train_size: 128,
        val_size: 1,
        ..PlantedTaskConfig::default()
    };
    let ds = gen_planted(&task, Execution::Sequential).expect("dataset");
    let batch: Vec<usize> = (0..ds.train.len()).collect();
    let mut group = c.benchmark_group("batch_gradient");
    for head in ["attention", "rank_p", "pose_reg", "cbp"] {
        let cfg = TrainConfig {
            head: head.parse().expect("head"),
            rank: 2,
            ..TrainConfig::default()
        };
        let model = cfg.init_model(task.features, task.classes).expect("model");
        let inputs = prepare_inputs(&model, &ds.train, Execution::Sequential).expect("inputs");
        for (name, exec) in MODES {
            group.bench_function(BenchmarkId::new(name, head), |b| {
                b.iter(|| {
                    black_box(
                        batch_gradient(&model, &inputs, &ds.train, &batch, LossKind::Softmax, exec).expect("grad"),
                    )
                })
            });
        }
    }
    group.finish();
}

fn sketch_trials(c: &mut Criterion) {
    let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let y: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).cos()).collect();
    let mut group = c.benchmark_group("sketch_trials");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(sketch_inner_product_trials(&x, &y, 256, 1, 500, exec).expect("trials")))
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, sketch_trials);
criterion_main!(benches);
