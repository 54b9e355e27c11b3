//! Runs the shared-vs-independent BN/classifier ablation grid under the
//! leave-one-domain-out protocol at a reduced scale and prints the
//! aggregated table.
//!
//! Run with: `cargo run --release --example ablation_grid`

use multimatch::harness::{run_ablation_grid, table7_grid};
use multimatch::trainer::ExperimentConfig;

fn main() {
    // Reduced iteration budget keeps the 3 entries x 4 targets x 2 seeds
    // grid around a minute.
    let base = ExperimentConfig {
        max_iter: 300,
        epoch_iters: 100,
        ..ExperimentConfig::default()
    };
    let out = std::env::temp_dir().join("multimatch-ablation-grid");
    let summary = run_ablation_grid(&base, &table7_grid(), &[0, 1], &out)
        .expect("grid run");

    println!("{:<34} {:>10} {:>8} {:>8}", "entry", "target acc", "std", "pl f1");
    for entry in &summary.entries {
        println!(
            "{:<34} {:>10.4} {:>8.4} {:>8.2}",
            entry.entry, entry.mean_target_acc, entry.std_target_acc, entry.mean_pl_macro_f1
        );
    }
    println!("\nper-target means:");
    for entry in &summary.entries {
        let row: Vec<String> = entry.per_target_mean.iter().map(|a| format!("{a:.3}")).collect();
        println!("  {:<32} [{}]", entry.entry, row.join(", "));
    }
    println!("\nartifacts under {}", out.display());
}
