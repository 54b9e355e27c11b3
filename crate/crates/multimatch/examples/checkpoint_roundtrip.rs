//! Trains briefly, saves the model to the flat text checkpoint format,
//! reloads it, and verifies the round trip is bit-exact.
//!
//! Run with: `cargo run --release --example checkpoint_roundtrip`

use multimatch::harness::prepare_dataset;
use multimatch::model::MultiTaskModel;
use multimatch::trainer::{train, ExperimentConfig};

fn main() {
    let config = ExperimentConfig {
        max_iter: 100,
        epoch_iters: 100,
        ..ExperimentConfig::default()
    };
    let (_, sources, target) = prepare_dataset(&config).expect("valid config");
    let (model, _) = train(&config, &sources, &target).expect("training run");

    let text = model.save();
    println!("checkpoint: {} lines", text.lines().count());
    println!("header: {}", text.lines().next().unwrap());

    let restored = MultiTaskModel::load(&text).expect("parse checkpoint");
    assert_eq!(restored.save(), text, "round trip must be bit-exact");

    let sample = &target[0];
    let a = model.predict_all_tasks(&sample.features).unwrap();
    let b = restored.predict_all_tasks(&sample.features).unwrap();
    for task in 0..a.n_tasks() {
        assert_eq!(a.column(task), b.column(task));
    }
    println!("reloaded model reproduces predictions exactly");
}
