//! Training-loop behaviour on small synthetic problems.

use mossformer::data::synth_dataset;
use mossformer::train::{mean_loss, Trainer};
use mossformer::{ModelConfig, TrainConfig};

#[test]
fn training_lowers_the_loss() {
    let data = synth_dataset::<f32>(0, 8, 2, 2000, 8000).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        max_steps: Some(300),
        hold_epochs: usize::MAX,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(ModelConfig::tiny(), cfg).unwrap();
    let before = mean_loss(&trainer.model, &trainer.params, &data).unwrap();
    let report = trainer.fit(&data, &[], |_| {}).unwrap();
    assert_eq!(report.step_losses.len(), 300);
    let after = mean_loss(&trainer.model, &trainer.params, &data).unwrap();
    assert!(after < before, "{before} -> {after}");
    let first = report.step_losses[0];
    let tail = &report.step_losses[290..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(tail_mean < first, "{first} -> {tail_mean}");
}

#[test]
fn distinct_seeds_give_distinct_fundamentals() {
    let mut seen = Vec::new();
    for seed in 0..100 {
        let m = synth_dataset::<f64>(seed, 1, 2, 64, 8000)
            .unwrap()
            .remove(0);
        seen.extend(m.fundamentals);
    }
    let total = seen.len();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    assert_eq!(seen.len(), total);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_run() {
    let data = synth_dataset::<f64>(1, 4, 2, 400, 8000).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 4,
        hold_epochs: 1,
        ..TrainConfig::default()
    };
    let mut straight = Trainer::<f64>::new(ModelConfig::tiny(), cfg.clone()).unwrap();
    let full = straight.fit(&data, &[], |_| {}).unwrap();

    let mut first = Trainer::<f64>::new(
        ModelConfig::tiny(),
        TrainConfig {
            max_epochs: 2,
            ..cfg.clone()
        },
    )
    .unwrap();
    first.fit(&data, &[], |_| {}).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = mossformer::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::<f64>::from_checkpoint(ckpt, cfg).unwrap();
    let rest = resumed.fit(&data, &[], |_| {}).unwrap();
    assert_eq!(rest.step_losses, full.step_losses[8..]);
}
