//! Run orchestration: single experiments with reproducible artifacts,
//! leave-one-domain-out ablation grids, after-the-fact reports, and the
//! generalization-bound evaluation pipeline.
//!
//! Every run directory is self-describing: the canonical config text, the
//! dataset export, the per-epoch metrics CSV, the final model checkpoint,
//! and a JSON summary stamped with the config hash. Re-running a config
//! reproduces every artifact byte for byte.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{self, ConfigError};
use crate::data::{generate, DataError, MultiDomainDataset, Sample};
use crate::eval::{
    estimate_lambda, proxy_divergence, BoundInputs, BoundReport, EvalError,
};
use crate::fusion::{TestRule, TrainRule};
use crate::model::{BnMode, HeadMode};
use crate::trainer::{train, ExperimentConfig, MetricsRecord, TrainError};

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug)]
pub enum HarnessError {
    Io(String),
    Config(ConfigError),
    Data(DataError),
    Train(TrainError),
    Eval(EvalError),
    MissingArtifact { path: PathBuf },
    Grid(String),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(reason) => write!(f, "io: {reason}"),
            Self::Config(e) => write!(f, "{e}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Train(e) => write!(f, "{e}"),
            Self::Eval(e) => write!(f, "{e}"),
            Self::MissingArtifact { path } => write!(f, "missing artifact: {}", path.display()),
            Self::Grid(reason) => write!(f, "grid spec: {reason}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e)
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        HarnessError::Data(e)
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        HarnessError::Train(e)
    }
}

impl From<EvalError> for HarnessError {
    fn from(e: EvalError) -> Self {
        HarnessError::Eval(e)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Identity card of a run or grid invocation, written as `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub grid: Option<String>,
}

/// Final state of one completed run, also serialized as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub target_domain: usize,
    pub epochs: usize,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub pl_precision: f64,
    pub pl_recall: f64,
    pub pl_macro_f1: f64,
    pub domain_acc: Vec<f64>,
    pub target_acc: f64,
}

fn metrics_csv(history: &[MetricsRecord], n_domains: usize) -> String {
    let mut out = MetricsRecord::csv_header(n_domains);
    out.push('\n');
    for record in history {
        out.push_str(&record.csv_row());
        out.push('\n');
    }
    out
}

/// Builds the `n_domains + 1` generated domains and splits off the
/// configured target.
pub fn prepare_dataset(
    config: &ExperimentConfig,
) -> Result<(MultiDomainDataset, MultiDomainDataset, Vec<Sample>)> {
    let full = generate(
        config.seed,
        config.n_domains + 1,
        config.classes,
        config.dim,
        config.labels_per_class,
        config.unlabeled_per_class,
        config.shift_strength,
    )?;
    let (sources, target) = full.leave_one_out(config.target_domain);
    Ok((full, sources, target))
}

/// Trains one configuration and writes the full artifact set into
/// `out_dir`: `config.txt`, `dataset.txt`, `metrics.csv`, `checkpoint.txt`,
/// `summary.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    config
        .validate()
        .map_err(|e| HarnessError::Config(ConfigError::Validation(e.to_string())))?;
    fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", out_dir.display())))?;
    let (full, sources, target) = prepare_dataset(config)?;
    write_file(&out_dir.join("config.txt"), &config::serialize_config(config))?;
    write_file(&out_dir.join("dataset.txt"), &full.export())?;
    let (model, history) = train(config, &sources, &target)?;
    write_file(
        &out_dir.join("metrics.csv"),
        &metrics_csv(&history, config.n_domains),
    )?;
    write_file(&out_dir.join("checkpoint.txt"), &model.save())?;
    let last = history.last().expect("max_iter >= 1 yields a record");
    let summary = RunSummary {
        config_hash: config::config_hash(config),
        seed: config.seed,
        target_domain: config.target_domain,
        epochs: history.len(),
        sup_loss: last.sup_loss,
        unsup_loss: last.unsup_loss,
        pl_precision: last.pl_precision,
        pl_recall: last.pl_recall,
        pl_macro_f1: last.pl_macro_f1,
        domain_acc: last.domain_acc.clone(),
        target_acc: last.target_acc,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    write_file(&out_dir.join("summary.json"), &json)?;
    Ok(summary)
}

/// One named configuration axis of an ablation grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridEntry {
    pub name: String,
    pub train_rule: TrainRule,
    pub test_rule: TestRule,
    pub bn_mode: BnMode,
    pub head_mode: HeadMode,
}

impl GridEntry {
    fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            train_rule: self.train_rule,
            test_rule: self.test_rule,
            bn_mode: self.bn_mode,
            head_mode: self.head_mode,
            ..base.clone()
        }
    }

    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '-'
                }
            })
            .collect()
    }
}

fn entry(
    name: &str,
    train_rule: TrainRule,
    test_rule: TestRule,
    bn_mode: BnMode,
    head_mode: HeadMode,
) -> GridEntry {
    GridEntry {
        name: name.to_string(),
        train_rule,
        test_rule,
        bn_mode,
        head_mode,
    }
}

/// Baseline vs. multi-task framework vs. train/test fusion.
pub fn table2_grid() -> Vec<GridEntry> {
    use BnMode::PerTask as BN;
    use HeadMode::PerTask as HD;
    vec![
        entry(
            "baseline-fixmatch",
            TrainRule::LocalOnly,
            TestRule::GlobalOnly,
            BnMode::Shared,
            HeadMode::Shared,
        ),
        entry("mtl-train-local-test-global", TrainRule::LocalOnly, TestRule::GlobalOnly, BN, HD),
        entry("mtl-train-local-test-global-local", TrainRule::LocalOnly, TestRule::Avg, BN, HD),
        entry("mtl-train-global-local-test-global", TrainRule::Max, TestRule::GlobalOnly, BN, HD),
        entry("mtl-train-global-local-test-global-local", TrainRule::Max, TestRule::Avg, BN, HD),
    ]
}

/// The train-fusion x test-fusion variant grid.
pub fn table3_grid() -> Vec<GridEntry> {
    use BnMode::PerTask as BN;
    use HeadMode::PerTask as HD;
    vec![
        entry("train-max-test-avg", TrainRule::Max, TestRule::Avg, BN, HD),
        entry("train-max-test-avg-all", TrainRule::Max, TestRule::AvgAll, BN, HD),
        entry("train-max-test-max", TrainRule::Max, TestRule::Max, BN, HD),
        entry("train-avg-test-avg", TrainRule::Avg, TestRule::Avg, BN, HD),
        entry("train-avg-test-avg-all", TrainRule::Avg, TestRule::AvgAll, BN, HD),
        entry("train-avg-test-max", TrainRule::Avg, TestRule::Max, BN, HD),
    ]
}

/// Independent vs. shared batch normalization and classifier.
pub fn table7_grid() -> Vec<GridEntry> {
    vec![
        entry("independent-bn-and-classifier", TrainRule::Max, TestRule::Avg, BnMode::PerTask, HeadMode::PerTask),
        entry("shared-bn", TrainRule::Max, TestRule::Avg, BnMode::Shared, HeadMode::PerTask),
        entry("shared-classifier", TrainRule::Max, TestRule::Avg, BnMode::PerTask, HeadMode::Shared),
    ]
}

pub fn builtin_grid(name: &str) -> Option<Vec<GridEntry>> {
    match name {
        "table2" => Some(table2_grid()),
        "table3" => Some(table3_grid()),
        "table7" => Some(table7_grid()),
        _ => None,
    }
}

/// Custom grid format: `name train_rule test_rule bn_mode head_mode`, one
/// entry per line.
pub fn parse_grid(text: &str) -> Result<Vec<GridEntry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(HarnessError::Grid(format!(
                "line {}: expected `name train_rule test_rule bn_mode head_mode`",
                idx + 1
            )));
        }
        let bad = |what: &str, val: &str| {
            HarnessError::Grid(format!("line {}: unknown {what} {val:?}", idx + 1))
        };
        entries.push(GridEntry {
            name: fields[0].to_string(),
            train_rule: config::parse_train_rule(fields[1])
                .ok_or_else(|| bad("train_rule", fields[1]))?,
            test_rule: config::parse_test_rule(fields[2])
                .ok_or_else(|| bad("test_rule", fields[2]))?,
            bn_mode: config::parse_bn_mode(fields[3]).ok_or_else(|| bad("bn_mode", fields[3]))?,
            head_mode: config::parse_head_mode(fields[4])
                .ok_or_else(|| bad("head_mode", fields[4]))?,
        });
    }
    if entries.is_empty() {
        return Err(HarnessError::Grid("no entries".to_string()));
    }
    Ok(entries)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub entry: String,
    pub target_domain: usize,
    pub seed: u64,
    pub target_acc: f64,
    pub pl_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntrySummary {
    pub entry: String,
    /// Mean target accuracy per held-out domain, averaged over seeds.
    pub per_target_mean: Vec<f64>,
    pub mean_target_acc: f64,
    pub std_target_acc: f64,
    pub mean_pl_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub cells: Vec<GridCell>,
    pub entries: Vec<EntrySummary>,
}

/// Runs every (entry, held-out domain, seed) cell under the leave-one-
/// domain-out protocol and aggregates target accuracy. Each cell owns its
/// own artifact subdirectory.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    entries: &[GridEntry],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<GridSummary> {
    if seeds.is_empty() {
        return Err(HarnessError::Grid("need at least one seed".to_string()));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", out_dir.display())))?;
    let n_targets = base.n_domains + 1;
    let mut cells = Vec::new();
    let mut summaries = Vec::new();
    for item in entries {
        let mut per_target = vec![0.0; n_targets];
        let mut all = Vec::new();
        let mut f1 = Vec::new();
        for target_domain in 0..n_targets {
            for &seed in seeds {
                let config = ExperimentConfig {
                    seed,
                    target_domain,
                    ..item.apply(base)
                };
                let cell_dir = out_dir
                    .join(item.slug())
                    .join(format!("target{target_domain}"))
                    .join(format!("seed{seed}"));
                let summary = run_experiment(&config, &cell_dir)?;
                per_target[target_domain] += summary.target_acc / seeds.len() as f64;
                all.push(summary.target_acc);
                f1.push(summary.pl_macro_f1);
                cells.push(GridCell {
                    entry: item.name.clone(),
                    target_domain,
                    seed,
                    target_acc: summary.target_acc,
                    pl_macro_f1: summary.pl_macro_f1,
                });
            }
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
        summaries.push(EntrySummary {
            entry: item.name.clone(),
            per_target_mean: per_target,
            mean_target_acc: mean,
            std_target_acc: var.sqrt(),
            mean_pl_macro_f1: f1.iter().sum::<f64>() / f1.len() as f64,
        });
    }
    let summary = GridSummary {
        cells,
        entries: summaries,
    };
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Io(e.to_string()))?;
    write_file(&out_dir.join("grid_summary.json"), &json)?;
    let mut csv = String::from("entry,target_domain,seed,target_acc,pl_macro_f1\n");
    for cell in &summary.cells {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.entry, cell.target_domain, cell.seed, cell.target_acc, cell.pl_macro_f1
        ));
    }
    write_file(&out_dir.join("grid_cells.csv"), &csv)?;
    Ok(summary)
}

struct ParsedMetrics {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_metrics(path: &Path) -> Result<ParsedMetrics> {
    let text =
        fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| HarnessError::MissingArtifact {
            path: path.to_path_buf(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok(ParsedMetrics { header, rows })
}

fn find_runs(dir: &Path) -> Vec<PathBuf> {
    let mut runs = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        if current.join("metrics.csv").is_file() {
            runs.push(current.clone());
        }
        if let Ok(entries) = fs::read_dir(&current) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                }
            }
        }
    }
    runs.sort();
    runs
}

/// Post-hoc reporting over one or more archived runs under `dir`: writes a
/// `pl_precision.csv` series (epoch, precision) next to every metrics file
/// and a `report.txt` comparison table at `dir`. Re-running on the same
/// artifacts reproduces identical bytes.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = find_runs(dir);
    if runs.is_empty() {
        return Err(HarnessError::MissingArtifact {
            path: dir.join("metrics.csv"),
        });
    }
    let mut written = Vec::new();
    let mut finals: Vec<(String, Vec<String>, Vec<String>)> = Vec::new();
    for run in &runs {
        let metrics = read_metrics(&run.join("metrics.csv"))?;
        let epoch_col = 0;
        let pl_col = metrics
            .header
            .iter()
            .position(|h| h == "pl_precision")
            .ok_or_else(|| HarnessError::Io("metrics.csv lacks pl_precision".to_string()))?;
        let mut series = String::from("epoch,pl_precision\n");
        for row in &metrics.rows {
            series.push_str(&format!("{},{}\n", row[epoch_col], row[pl_col]));
        }
        let series_path = run.join("pl_precision.csv");
        write_file(&series_path, &series)?;
        written.push(series_path);
        if let Some(last) = metrics.rows.last() {
            let label = run
                .strip_prefix(dir)
                .unwrap_or(run)
                .to_string_lossy()
                .to_string();
            let label = if label.is_empty() { ".".to_string() } else { label };
            finals.push((label, metrics.header.clone(), last.clone()));
        }
    }

    let mut report = String::from("run comparison (final epoch)\n");
    let acc_columns: Vec<usize> = finals
        .first()
        .map(|(_, header, _)| {
            header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with("acc_domain_") || *h == "target_acc")
                .map(|(i, _)| i)
                .collect()
        })
        .unwrap_or_default();
    for (label, header, row) in &finals {
        report.push_str(&format!("\n[{label}]\n"));
        for (h, v) in header.iter().zip(row) {
            report.push_str(&format!("  {h} = {v}\n"));
        }
        if let Some((_, base_header, base_row)) = finals.first() {
            if base_header == header && label != &finals[0].0 {
                report.push_str("  delta vs first run:\n");
                for &col in &acc_columns {
                    let a: f64 = row[col].parse().unwrap_or(f64::NAN);
                    let b: f64 = base_row[col].parse().unwrap_or(f64::NAN);
                    report.push_str(&format!("    {} {:+}\n", header[col], a - b));
                }
            }
        }
    }
    let report_path = dir.join("report.txt");
    write_file(&report_path, &report)?;
    written.push(report_path);
    Ok(written)
}

/// Capacity proxy for the bound: the discriminator's parameter count.
pub fn default_capacity_proxy(dim: usize) -> f64 {
    crate::eval::discriminator_param_count(dim) as f64
}

/// Evaluates the generalization bound on the configured benchmark: lambda
/// and divergence estimated per source domain against the held-out target.
pub fn evaluate_bound(config: &ExperimentConfig, delta: f64) -> Result<BoundReport> {
    let (_, sources, target) = prepare_dataset(config)?;
    let mut lambda = Vec::with_capacity(sources.n_domains());
    let mut divergence = Vec::with_capacity(sources.n_domains());
    let target_features: Vec<Vec<f64>> = target.iter().map(|s| s.features.clone()).collect();
    for (j, domain) in sources.domains.iter().enumerate() {
        let pool = domain.eval_pool();
        lambda.push(estimate_lambda(
            &pool,
            &target,
            config.classes,
            config.seed.wrapping_add(j as u64),
        )?);
        let features: Vec<Vec<f64>> = pool.iter().map(|s| s.features.clone()).collect();
        divergence.push(proxy_divergence(
            &features,
            &target_features,
            config.seed.wrapping_add(1000 + j as u64),
        )?);
    }
    let m = config.n_domains * config.classes * config.labels_per_class;
    let eps_target = estimate_lambda(&target, &target, config.classes, config.seed)? / 2.0;
    let inputs = BoundInputs::uniform(
        config.n_domains,
        m,
        default_capacity_proxy(config.dim),
        delta,
        lambda,
        divergence,
        eps_target,
    );
    Ok(crate::eval::bound_report(&inputs, true)?)
}
