//! Walks the prediction-fusion rules on a hand-built prediction matrix:
//! row-max labeling, most-confident-task selection, the training-side
//! pseudo-label variants, and the four test-side decision rules.
//!
//! Run with: `cargo run --release --example fusion_rules`

use multimatch::fusion::{
    predict_label, select_task, test_predict, train_pseudo_label, PredictionMatrix, TestRule,
    TrainRule,
};

fn main() {
    // Two local tasks plus the global task, three classes.
    let local0 = vec![0.62, 0.25, 0.13];
    let local1 = vec![0.10, 0.75, 0.15];
    let global = vec![0.30, 0.45, 0.25];
    let pred = PredictionMatrix::new(vec![local0.clone(), local1.clone(), global.clone()]).unwrap();

    let cols: Vec<&[f64]> = vec![&local0, &local1, &global];
    let onehot = predict_label(&cols).unwrap();
    println!("predict_label over all columns -> {onehot:?}");

    let (column, task) = select_task(&pred.local_columns()).unwrap();
    println!("select_task picks local task {task}: {column:?}");

    for rule in [TrainRule::LocalOnly, TrainRule::Max, TrainRule::Avg] {
        let pl = train_pseudo_label(&pred, 0, rule, 0.6).unwrap();
        println!(
            "train rule {rule:?} for a domain-0 sample: class {} confidence {:.3} retained {}",
            pl.class_index, pl.confidence, pl.retained
        );
    }

    for rule in [
        TestRule::GlobalOnly,
        TestRule::Avg,
        TestRule::AvgAll,
        TestRule::Max,
    ] {
        let class = test_predict(&pred, rule).unwrap();
        println!("test rule {rule:?} -> class {class}");
    }
}
