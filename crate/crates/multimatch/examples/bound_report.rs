//! Evaluates the multi-domain generalization bound on the default
//! benchmark: per-domain joint-error and divergence estimates feed the
//! closed-form bound, itemized as JSON.
//!
//! Run with: `cargo run --release --example bound_report`

use multimatch::eval::{bound_upper, BoundInputs};
use multimatch::harness::evaluate_bound;
use multimatch::trainer::ExperimentConfig;

fn main() {
    let config = ExperimentConfig::default();
    let report = evaluate_bound(&config, 0.05).expect("bound evaluation");
    println!("{}", serde_json::to_string_pretty(&report).unwrap());

    // The bound shrinks as the labeled pool grows.
    println!("\ncomplexity term vs labeled sample count (everything else zeroed):");
    for m in [30usize, 60, 120, 240, 480] {
        let inputs = BoundInputs::uniform(3, m, 154.0, 0.05, vec![0.0; 3], vec![0.0; 3], 0.0);
        let total = bound_upper(&inputs, true).expect("valid inputs");
        println!("  m = {m:>4}: bound {total:.4}");
    }
}
