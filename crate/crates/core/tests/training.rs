use std::collections::BTreeMap;

use dplab_core::penalise::{ScaleMode, StrategyKind, WeightingStrategy};
use dplab_core::synthdata::{build_benchmark, read_dataset, write_dataset, BenchmarkConfig};
use dplab_core::trainer::{run_training, TrainConfig};

fn cfg(strategy: WeightingStrategy, epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: 0.02, epochs, strategy, seed: 4, record_image_losses: true, ..TrainConfig::default() }
}

#[test]
fn single_epoch_trains_on_unit_weights() {
    let splits = build_benchmark::<f64>(&BenchmarkConfig::smoke_preset()).unwrap();
    let run = run_training(&splits.official_train, &cfg(WeightingStrategy::dp(), 1)).unwrap();
    assert_eq!(run.epochs.len(), 1);
    assert!(run.epochs[0].weights_used.weights.values().all(|w| *w == 1.0));
    assert_eq!(run.weight_history.len(), 2);
    assert_ne!(run.weight_history[1], run.weight_history[0]);
}

#[test]
fn second_epoch_weights_follow_first_epoch_losses() {
    let splits = build_benchmark::<f64>(&BenchmarkConfig::smoke_preset()).unwrap();
    let run = run_training(&splits.official_train, &cfg(WeightingStrategy::dp(), 2)).unwrap();
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for l in &run.epochs[0].image_losses {
        acc.entry(l.domain).or_default().push(l.loss);
    }
    let avg: Vec<f64> = acc.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let z: f64 = avg.iter().map(|a| a.exp()).sum();
    for (i, w) in run.epochs[1].weights_used.weights.values().enumerate() {
        assert!((w - 2.0 * avg[i].exp() / z).abs() < 1e-12);
    }
}

#[test]
fn weights_stay_normalised_in_every_mode() {
    let splits = build_benchmark::<f64>(&BenchmarkConfig::smoke_preset()).unwrap();
    for kind in [StrategyKind::DomainPenalisation, StrategyKind::Erm, StrategyKind::GroupDro] {
        for mode in [ScaleMode::UnitSum, ScaleMode::DomainCount] {
            let s = WeightingStrategy::new(kind).with_scale_mode(mode);
            let run = run_training(&splits.official_train, &cfg(s, 4)).unwrap();
            let target = if mode == ScaleMode::UnitSum { 1.0 } else { 2.0 };
            for w in &run.weight_history[1..] {
                assert!((w.sum() - target).abs() < 1e-12, "{} {:?}: {}", s.label(), mode, w.sum());
                assert!(w.weights.values().all(|v| *v > 0.0));
            }
        }
    }
}

#[test]
fn training_on_reloaded_data_is_identical() {
    let config = BenchmarkConfig::smoke_preset();
    let splits = build_benchmark::<f64>(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&splits, Some(&config), dir.path()).unwrap();
    let (back, manifest) = read_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(manifest.config.as_ref(), Some(&config));
    let c = cfg(WeightingStrategy::dp(), 2);
    let a = run_training(&splits.official_train, &c).unwrap();
    let b = run_training(&back.official_train, &c).unwrap();
    assert_eq!(a, b);
}
