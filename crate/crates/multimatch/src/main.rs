//! Command-line front end: single runs, ablation grids, post-hoc reports,
//! and bound evaluation, all driven by the plain-text config format.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when training
//! diverges, 1 for any other failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use multimatch::config::{
    self, load_config, parse_bn_mode, parse_head_mode, parse_test_rule, parse_train_rule,
    ConfigError,
};
use multimatch::data::DataError;
use multimatch::harness::{
    builtin_grid, emit_report, evaluate_bound, parse_grid, run_ablation_grid, run_experiment,
    HarnessError, RunManifest,
};
use multimatch::trainer::{ExperimentConfig, TrainError};

#[derive(Parser, Debug)]
#[command(
    name = "multimatch",
    about = "Multi-task semi-supervised domain generalization lab: synthetic multi-domain \
             benchmarks, confidence-thresholded pseudo-label training with prediction fusion, \
             ablation grids, and a generalization-bound evaluator."
)]
struct Cli {
    /// Run configuration file (key = value lines); defaults are used when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Single seed override.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Comma-separated seed list; each seed runs into its own subdirectory.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Ablation grid: table2, table3, table7, or a path to a custom grid
    /// file.
    #[arg(long)]
    grid: Option<String>,

    /// Output directory for run artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Regenerate reports over an existing run directory, then exit.
    #[arg(long)]
    report: Option<PathBuf>,

    /// Evaluate the generalization bound for the configured benchmark and
    /// write the JSON report to this path, then exit.
    #[arg(long)]
    bound: Option<PathBuf>,

    #[arg(long, value_name = "RULE")]
    train_rule: Option<String>,

    #[arg(long, value_name = "RULE")]
    test_rule: Option<String>,

    #[arg(long, value_name = "MODE")]
    bn_mode: Option<String>,

    #[arg(long, value_name = "MODE")]
    head_mode: Option<String>,

    #[arg(long)]
    tau: Option<f64>,

    #[arg(long)]
    labels_per_class: Option<usize>,
}

fn exit_code_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_) | HarnessError::Grid(_) => 2,
        HarnessError::Data(DataError::InvalidConfig(_)) => 2,
        HarnessError::Train(TrainError::Numeric { .. }) => 3,
        HarnessError::Train(TrainError::InvalidConfig(_)) => 2,
        _ => 1,
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let bad = |what: &str, value: &str| {
        HarnessError::Config(ConfigError::Validation(format!(
            "unknown {what} {value:?}"
        )))
    };
    if let Some(rule) = &cli.train_rule {
        config.train_rule = parse_train_rule(rule).ok_or_else(|| bad("train rule", rule))?;
    }
    if let Some(rule) = &cli.test_rule {
        config.test_rule = parse_test_rule(rule).ok_or_else(|| bad("test rule", rule))?;
    }
    if let Some(mode) = &cli.bn_mode {
        config.bn_mode = parse_bn_mode(mode).ok_or_else(|| bad("bn mode", mode))?;
    }
    if let Some(mode) = &cli.head_mode {
        config.head_mode = parse_head_mode(mode).ok_or_else(|| bad("head mode", mode))?;
    }
    if let Some(tau) = cli.tau {
        config.tau = tau;
    }
    if let Some(labels) = cli.labels_per_class {
        config.labels_per_class = labels;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config
        .validate()
        .map_err(|e| HarnessError::Config(ConfigError::Validation(e.to_string())))?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    if let Some(dir) = &cli.report {
        let written = emit_report(dir)?;
        for path in written {
            println!("wrote {}", path.display());
        }
        return Ok(());
    }

    let config = build_config(cli)?;

    if let Some(path) = &cli.bound {
        let report = evaluate_bound(&config, 0.05)?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| HarnessError::Io(e.to_string()))?;
        std::fs::write(path, &json).map_err(|e| HarnessError::Io(e.to_string()))?;
        println!("bound total {:.6} -> {}", report.total, path.display());
        return Ok(());
    }

    let seeds: Vec<u64> = match &cli.seeds {
        Some(list) if !list.is_empty() => list.clone(),
        _ => vec![config.seed],
    };

    let manifest = RunManifest {
        config_hash: config::config_hash(&config),
        seeds: seeds.clone(),
        out_dir: cli.out.display().to_string(),
        grid: cli.grid.clone(),
    };

    if let Some(grid) = &cli.grid {
        let entries = match builtin_grid(grid) {
            Some(entries) => entries,
            None => {
                let text = std::fs::read_to_string(grid)
                    .map_err(|e| HarnessError::Grid(format!("{grid}: {e}")))?;
                parse_grid(&text)?
            }
        };
        let summary = run_ablation_grid(&config, &entries, &seeds, &cli.out)?;
        write_manifest(&manifest, &cli.out)?;
        for entry in &summary.entries {
            println!(
                "{}: target acc {:.4} +- {:.4} (pl macro-f1 {:.2})",
                entry.entry, entry.mean_target_acc, entry.std_target_acc, entry.mean_pl_macro_f1
            );
        }
        return Ok(());
    }

    let multi = seeds.len() > 1;
    for &seed in &seeds {
        let run_config = ExperimentConfig { seed, ..config.clone() };
        let dir = if multi {
            cli.out.join(format!("seed{seed}"))
        } else {
            cli.out.clone()
        };
        let summary = run_experiment(&run_config, &dir)?;
        println!(
            "seed {seed}: target acc {:.4}, pl macro-f1 {:.2} ({} epochs) -> {}",
            summary.target_acc,
            summary.pl_macro_f1,
            summary.epochs,
            dir.display()
        );
    }
    write_manifest(&manifest, &cli.out)?;
    Ok(())
}

fn write_manifest(manifest: &RunManifest, out: &std::path::Path) -> Result<(), HarnessError> {
    let json =
        serde_json::to_string_pretty(manifest).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(out.join("manifest.json"), json)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
