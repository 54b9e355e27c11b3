//! The multi-task fused setup against the single-task confidence-threshold
//! baseline on one benchmark seed: pseudo-label quality and held-out
//! accuracy side by side.
//!
//! Run with: `cargo run --release --example compare_baseline`

use multimatch::harness::prepare_dataset;
use multimatch::trainer::{train, ExperimentConfig, MetricsRecord};

fn run(config: &ExperimentConfig) -> MetricsRecord {
    let (_, sources, target) = prepare_dataset(config).expect("valid config");
    let (_, history) = train(config, &sources, &target).expect("training run");
    history.last().unwrap().clone()
}

fn main() {
    let multimatch = ExperimentConfig { seed: 3, ..ExperimentConfig::default() };
    let baseline = ExperimentConfig { seed: 3, ..ExperimentConfig::fixmatch_baseline() };

    println!("training the fused multi-task configuration...");
    let ours = run(&multimatch);
    println!("training the baseline configuration...");
    let base = run(&baseline);

    println!("\n                     baseline   multi-task fused");
    println!("pl precision         {:8.2}   {:8.2}", base.pl_precision, ours.pl_precision);
    println!("pl recall            {:8.2}   {:8.2}", base.pl_recall, ours.pl_recall);
    println!("pl macro-F1          {:8.2}   {:8.2}", base.pl_macro_f1, ours.pl_macro_f1);
    println!("target accuracy      {:8.3}   {:8.3}", base.target_acc, ours.target_acc);
    println!(
        "\ndeltas: macro-F1 {:+.2}, target accuracy {:+.3}",
        ours.pl_macro_f1 - base.pl_macro_f1,
        ours.target_acc - base.target_acc
    );
}
