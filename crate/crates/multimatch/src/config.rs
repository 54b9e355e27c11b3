//! Plain-text run configuration: a `key = value` file covering every
//! experiment field, so a config file plus the binary fully pins a run.
//!
//! Format: one `key = value` pair per line, `#` comments and blank lines
//! ignored, every key required exactly once. [`serialize_config`] writes
//! the canonical form (fixed key order); [`config_hash`] is the SHA-256 of
//! that canonical text, used to stamp run artifacts.

use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::fusion::{TestRule, TrainRule};
use crate::model::{BnMode, HeadMode};
use crate::trainer::ExperimentConfig;

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse { line: usize, reason: String },
    MissingKey(&'static str),
    Validation(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(reason) => write!(f, "config io: {reason}"),
            Self::Parse { line, reason } => write!(f, "config line {line}: {reason}"),
            Self::MissingKey(key) => write!(f, "config is missing required key {key:?}"),
            Self::Validation(reason) => write!(f, "config invalid: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

const KEYS: &[&str] = &[
    "seed",
    "n_domains",
    "classes",
    "dim",
    "labels_per_class",
    "unlabeled_per_class",
    "shift_strength",
    "target_domain",
    "labeled_batch",
    "unlabeled_batch",
    "lr",
    "max_iter",
    "tau",
    "train_rule",
    "test_rule",
    "bn_mode",
    "head_mode",
    "hidden_width",
    "hidden_layers",
    "weak_jitter",
    "strong_jitter",
    "strong_dropout",
    "stat_mix_prob",
    "unsup_weight",
    "epoch_iters",
];

pub fn train_rule_name(rule: TrainRule) -> &'static str {
    match rule {
        TrainRule::LocalOnly => "local-only",
        TrainRule::Max => "max",
        TrainRule::Avg => "avg",
    }
}

pub fn test_rule_name(rule: TestRule) -> &'static str {
    match rule {
        TestRule::GlobalOnly => "global-only",
        TestRule::Avg => "avg",
        TestRule::AvgAll => "avg-all",
        TestRule::Max => "max",
    }
}

pub fn bn_mode_name(mode: BnMode) -> &'static str {
    match mode {
        BnMode::PerTask => "per-task",
        BnMode::Shared => "shared",
    }
}

pub fn head_mode_name(mode: HeadMode) -> &'static str {
    match mode {
        HeadMode::PerTask => "per-task",
        HeadMode::Shared => "shared",
    }
}

pub fn parse_train_rule(s: &str) -> Option<TrainRule> {
    match s {
        "local-only" => Some(TrainRule::LocalOnly),
        "max" => Some(TrainRule::Max),
        "avg" => Some(TrainRule::Avg),
        _ => None,
    }
}

pub fn parse_test_rule(s: &str) -> Option<TestRule> {
    match s {
        "global-only" => Some(TestRule::GlobalOnly),
        "avg" => Some(TestRule::Avg),
        "avg-all" => Some(TestRule::AvgAll),
        "max" => Some(TestRule::Max),
        _ => None,
    }
}

pub fn parse_bn_mode(s: &str) -> Option<BnMode> {
    match s {
        "per-task" => Some(BnMode::PerTask),
        "shared" => Some(BnMode::Shared),
        _ => None,
    }
}

pub fn parse_head_mode(s: &str) -> Option<HeadMode> {
    match s {
        "per-task" => Some(HeadMode::PerTask),
        "shared" => Some(HeadMode::Shared),
        _ => None,
    }
}

fn value_of(config: &ExperimentConfig, key: &str) -> String {
    match key {
        "seed" => config.seed.to_string(),
        "n_domains" => config.n_domains.to_string(),
        "classes" => config.classes.to_string(),
        "dim" => config.dim.to_string(),
        "labels_per_class" => config.labels_per_class.to_string(),
        "unlabeled_per_class" => config.unlabeled_per_class.to_string(),
        "shift_strength" => config.shift_strength.to_string(),
        "target_domain" => config.target_domain.to_string(),
        "labeled_batch" => config.labeled_batch.to_string(),
        "unlabeled_batch" => config.unlabeled_batch.to_string(),
        "lr" => config.lr.to_string(),
        "max_iter" => config.max_iter.to_string(),
        "tau" => config.tau.to_string(),
        "train_rule" => train_rule_name(config.train_rule).to_string(),
        "test_rule" => test_rule_name(config.test_rule).to_string(),
        "bn_mode" => bn_mode_name(config.bn_mode).to_string(),
        "head_mode" => head_mode_name(config.head_mode).to_string(),
        "hidden_width" => config.hidden_width.to_string(),
        "hidden_layers" => config.hidden_layers.to_string(),
        "weak_jitter" => config.weak_jitter.to_string(),
        "strong_jitter" => config.strong_jitter.to_string(),
        "strong_dropout" => config.strong_dropout.to_string(),
        "stat_mix_prob" => config.stat_mix_prob.to_string(),
        "unsup_weight" => config.unsup_weight.to_string(),
        "epoch_iters" => config.epoch_iters.to_string(),
        _ => unreachable!("unknown key {key}"),
    }
}

/// Canonical text form: fixed key order, `key = value` per line.
pub fn serialize_config(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    for key in KEYS {
        out.push_str(&format!("{key} = {}\n", value_of(config, key)));
    }
    out
}

/// SHA-256 hex digest of the canonical config text.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(serialize_config(config).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses the `key = value` format. Every key must appear; unknown keys and
/// malformed lines are reported with their line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    let mut seen = vec![false; KEYS.len()];
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
            line: lineno,
            reason: "expected `key = value`".to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        let slot = KEYS.iter().position(|k| *k == key).ok_or(ConfigError::Parse {
            line: lineno,
            reason: format!("unknown key {key:?}"),
        })?;
        if seen[slot] {
            return Err(ConfigError::Parse {
                line: lineno,
                reason: format!("duplicate key {key:?}"),
            });
        }
        seen[slot] = true;
        apply(&mut config, key, value).map_err(|reason| ConfigError::Parse {
            line: lineno,
            reason,
        })?;
    }
    for (slot, key) in KEYS.iter().enumerate() {
        if !seen[slot] {
            return Err(ConfigError::MissingKey(key));
        }
    }
    config
        .validate()
        .map_err(|e| ConfigError::Validation(e.to_string()))?;
    Ok(config)
}

fn apply(config: &mut ExperimentConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let bad = |key: &str, value: &str| format!("bad value {value:?} for {key}");
    macro_rules! parse {
        ($field:expr) => {
            $field = value.parse().map_err(|_| bad(key, value))?
        };
    }
    match key {
        "seed" => parse!(config.seed),
        "n_domains" => parse!(config.n_domains),
        "classes" => parse!(config.classes),
        "dim" => parse!(config.dim),
        "labels_per_class" => parse!(config.labels_per_class),
        "unlabeled_per_class" => parse!(config.unlabeled_per_class),
        "shift_strength" => parse!(config.shift_strength),
        "target_domain" => parse!(config.target_domain),
        "labeled_batch" => parse!(config.labeled_batch),
        "unlabeled_batch" => parse!(config.unlabeled_batch),
        "lr" => parse!(config.lr),
        "max_iter" => parse!(config.max_iter),
        "tau" => parse!(config.tau),
        "train_rule" => {
            config.train_rule = parse_train_rule(value).ok_or_else(|| bad(key, value))?
        }
        "test_rule" => config.test_rule = parse_test_rule(value).ok_or_else(|| bad(key, value))?,
        "bn_mode" => config.bn_mode = parse_bn_mode(value).ok_or_else(|| bad(key, value))?,
        "head_mode" => config.head_mode = parse_head_mode(value).ok_or_else(|| bad(key, value))?,
        "hidden_width" => parse!(config.hidden_width),
        "hidden_layers" => parse!(config.hidden_layers),
        "weak_jitter" => parse!(config.weak_jitter),
        "strong_jitter" => parse!(config.strong_jitter),
        "strong_dropout" => parse!(config.strong_dropout),
        "stat_mix_prob" => parse!(config.stat_mix_prob),
        "unsup_weight" => parse!(config.unsup_weight),
        "epoch_iters" => parse!(config.epoch_iters),
        _ => unreachable!(),
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{path:?}: {e}")))?;
    parse_config(&text)
}
