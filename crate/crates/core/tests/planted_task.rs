use attnpool::synth::{gen_planted, task_directions, PlantedTaskConfig};
use attnpool::Execution;

fn nearest_prototype_accuracy(config: &PlantedTaskConfig) -> f64 {
    let dirs = task_directions(config).unwrap();
    let ds = gen_planted(config, Execution::Sequential).unwrap();
    let s = config.signal_strength;
    let centers: Vec<Vec<f64>> = (0..config.classes)
        .map(|k| {
            (0..config.features)
                .map(|j| s * (dirs.prototypes.get(k, j) + config.saliency * dirs.saliency[j]))
                .collect()
        })
        .collect();
    let correct = ds
        .val
        .iter()
        .filter(|e| {
            let cell = e.x.row(e.planted_loc());
            let dist = |c: &Vec<f64>| c.iter().zip(cell).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..centers.len())
                .min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b])))
                .unwrap();
            best == e.label()
        })
        .count();
    correct as f64 / ds.val.len() as f64
}

#[test]
fn oracle_reading_the_planted_cell_separates_classes() {
    for signal_strength in [3.5, 4.0, 6.0] {
        let config = PlantedTaskConfig {
            signal_strength,
            val_size: 4000,
            train_size: 1,
            ..PlantedTaskConfig::default()
        };
        let acc = nearest_prototype_accuracy(&config);
        println!("signal {signal_strength}: oracle accuracy {acc:.4}");
        assert!(acc >= 0.95, "oracle accuracy {acc} at signal {signal_strength}");
    }
}

#[test]
fn oracle_at_signal_three_sits_at_the_simplex_bound() {
    let config = PlantedTaskConfig {
        val_size: 4000,
        train_size: 1,
        ..PlantedTaskConfig::default()
    };
    let acc = nearest_prototype_accuracy(&config);
    assert!((0.925..0.95).contains(&acc), "oracle accuracy {acc}");
}

#[test]
fn zero_signal_oracle_is_at_chance() {
    let config = PlantedTaskConfig {
        signal_strength: 0.0,
        val_size: 4000,
        train_size: 1,
        ..PlantedTaskConfig::default()
    };
    let acc = nearest_prototype_accuracy(&config);
    assert!((acc - 1.0 / 8.0).abs() < 0.03, "oracle accuracy {acc}");
}
