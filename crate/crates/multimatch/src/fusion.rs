//! Prediction-fusion rules over per-task softmax outputs.
//!
//! A sample's predictions form a `C x (N+1)` matrix whose columns are the
//! local tasks 1..N followed by the global task. Training-side fusion
//! builds the pseudo-label from the sample's own local column and the
//! global column; test-side fusion combines the global column with the
//! most confident local column. All ties break toward the lowest index.

use std::fmt;

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, PartialEq)]
pub enum FusionError {
    EmptyMatrix,
    DomainOutOfRange { domain: usize, n_local: usize },
    ColumnCount { expected: usize, got: usize },
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyMatrix => write!(f, "fusion requires a non-empty prediction matrix"),
            Self::DomainOutOfRange { domain, n_local } => {
                write!(f, "domain {domain} out of range for {n_local} local tasks")
            }
            Self::ColumnCount { expected, got } => {
                write!(f, "expected {expected} prediction columns, got {got}")
            }
        }
    }
}

impl std::error::Error for FusionError {}

/// How pseudo-labels are formed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRule {
    /// Local task only (no fusion).
    LocalOnly,
    /// Highest confidence wins between the local and global columns.
    Max,
    /// Mean of the local and global columns.
    Avg,
}

/// How the final class is predicted at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestRule {
    /// Global task only (no fusion).
    GlobalOnly,
    /// Mean of the most confident local column and the global column.
    Avg,
    /// Mean of all columns.
    AvgAll,
    /// Highest confidence wins between the most confident local column and
    /// the global column.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionScheme {
    pub train_rule: TrainRule,
    pub test_rule: TestRule,
}

/// A thresholded pseudo-label for one unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class_index: usize,
    pub confidence: f64,
    pub retained: bool,
}

/// Per-sample stack of per-task softmax columns (`N` local + 1 global).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    columns: Vec<Vec<f64>>,
    classes: usize,
}

impl PredictionMatrix {
    /// Columns must be equal-length probability vectors (each sums to 1
    /// within 1e-9).
    pub fn new(columns: Vec<Vec<f64>>) -> Result<PredictionMatrix> {
        let pm = Self::from_raw(columns)?;
        for col in &pm.columns {
            let sum: f64 = col.iter().sum();
            debug_assert!(
                (sum - 1.0).abs() < 1e-9 && col.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)),
                "column is not a probability vector: {col:?}"
            );
        }
        Ok(pm)
    }

    /// Raw score columns without the probability check. The fusion rules are
    /// argmax-level decisions, so they are well defined on any real matrix.
    pub fn from_raw(columns: Vec<Vec<f64>>) -> Result<PredictionMatrix> {
        if columns.is_empty() || columns[0].is_empty() {
            return Err(FusionError::EmptyMatrix);
        }
        let classes = columns[0].len();
        for col in &columns {
            assert_eq!(col.len(), classes, "ragged prediction matrix");
        }
        Ok(PredictionMatrix { columns, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Local columns plus the trailing global column.
    pub fn n_tasks(&self) -> usize {
        self.columns.len()
    }

    pub fn n_local(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn column(&self, task: usize) -> &[f64] {
        &self.columns[task]
    }

    pub fn global(&self) -> &[f64] {
        &self.columns[self.columns.len() - 1]
    }

    pub fn local_columns(&self) -> Vec<&[f64]> {
        self.columns[..self.columns.len() - 1]
            .iter()
            .map(|c| c.as_slice())
            .collect()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-max then argmax: returns a one-hot vector whose hot entry is the row
/// holding the largest value anywhere in the matrix.
pub fn predict_label(columns: &[&[f64]]) -> Result<Vec<f64>> {
    if columns.is_empty() || columns[0].is_empty() {
        return Err(FusionError::EmptyMatrix);
    }
    let classes = columns[0].len();
    let mut row_max = vec![f64::NEG_INFINITY; classes];
    for col in columns {
        for (c, &v) in col.iter().enumerate() {
            if v > row_max[c] {
                row_max[c] = v;
            }
        }
    }
    let hot = argmax(&row_max);
    let mut out = vec![0.0; classes];
    out[hot] = 1.0;
    Ok(out)
}

/// Returns (a copy of) the column containing the matrix's largest entry,
/// together with its index.
pub fn select_task(columns: &[&[f64]]) -> Result<(Vec<f64>, usize)> {
    if columns.is_empty() || columns[0].is_empty() {
        return Err(FusionError::EmptyMatrix);
    }
    let mut best_col = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (t, col) in columns.iter().enumerate() {
        for &v in col.iter() {
            if v > best_val {
                best_val = v;
                best_col = t;
            }
        }
    }
    Ok((columns[best_col].to_vec(), best_col))
}

/// Training-side pseudo-label for a sample from local task `domain`.
pub fn train_pseudo_label(
    pred: &PredictionMatrix,
    domain: usize,
    rule: TrainRule,
    tau: f64,
) -> Result<PseudoLabel> {
    let n_local = pred.n_local();
    if domain >= n_local {
        return Err(FusionError::DomainOutOfRange { domain, n_local });
    }
    let local = pred.column(domain);
    let global = pred.global();
    let (class_index, confidence) = match rule {
        TrainRule::LocalOnly => {
            let onehot = predict_label(&[local])?;
            let class = argmax(&onehot);
            (class, local[class])
        }
        TrainRule::Max => {
            let onehot = predict_label(&[local, global])?;
            let class = argmax(&onehot);
            (class, local[class].max(global[class]))
        }
        TrainRule::Avg => {
            let avg: Vec<f64> = local
                .iter()
                .zip(global)
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            let class = argmax(&avg);
            (class, avg[class])
        }
    };
    Ok(PseudoLabel {
        class_index,
        confidence,
        retained: confidence >= tau,
    })
}

/// Test-side class decision for a sample with unknown domain.
pub fn test_predict(pred: &PredictionMatrix, rule: TestRule) -> Result<usize> {
    if pred.n_local() == 0 {
        return Err(FusionError::ColumnCount {
            expected: 2,
            got: pred.n_tasks(),
        });
    }
    let global = pred.global();
    let class = match rule {
        TestRule::GlobalOnly => argmax(global),
        TestRule::Avg => {
            let (y_max, _) = select_task(&pred.local_columns())?;
            let avg: Vec<f64> = y_max
                .iter()
                .zip(global)
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            argmax(&avg)
        }
        TestRule::AvgAll => {
            let t = pred.n_tasks() as f64;
            let mut mean = vec![0.0; pred.classes()];
            for task in 0..pred.n_tasks() {
                for (m, &v) in mean.iter_mut().zip(pred.column(task)) {
                    *m += v / t;
                }
            }
            argmax(&mean)
        }
        TestRule::Max => {
            let (y_max, _) = select_task(&pred.local_columns())?;
            let onehot = predict_label(&[&y_max, global])?;
            argmax(&onehot)
        }
    };
    Ok(class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(columns: &[&[f64]]) -> PredictionMatrix {
        PredictionMatrix::new(columns.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn predict_label_hand_case() {
        // Row maxima [0.9, 0.7, 0.1]; argmax is row 0.
        let c0 = [0.9, 0.05, 0.05];
        let c1 = [0.2, 0.7, 0.1];
        assert_eq!(predict_label(&[&c0, &c1]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn predict_label_tie_takes_lowest_row() {
        let c0 = [1.0, 0.0];
        let c1 = [0.0, 1.0];
        assert_eq!(predict_label(&[&c0, &c1]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn predict_label_single_column_is_argmax() {
        let c = [0.1, 0.8, 0.1];
        assert_eq!(predict_label(&[&c]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn predict_label_empty_errors() {
        assert!(matches!(predict_label(&[]), Err(FusionError::EmptyMatrix)));
    }

    #[test]
    fn select_task_hand_case() {
        let c0 = [0.2, 0.5];
        let c1 = [0.8, 0.1];
        let (col, idx) = select_task(&[&c0, &c1]).unwrap();
        assert_eq!(col, vec![0.8, 0.1]);
        assert_eq!(idx, 1);
    }

    #[test]
    fn select_task_single_and_tie() {
        let c = [0.3, 0.7];
        let (col, idx) = select_task(&[&c]).unwrap();
        assert_eq!((col, idx), (vec![0.3, 0.7], 0));
        let (col, idx) = select_task(&[&c, &c]).unwrap();
        assert_eq!((col, idx), (vec![0.3, 0.7], 0));
    }

    #[test]
    fn train_rules_agree_when_columns_agree() {
        let p = pm(&[&[0.7, 0.3], &[0.7, 0.3]]);
        for rule in [TrainRule::LocalOnly, TrainRule::Max, TrainRule::Avg] {
            let pl = train_pseudo_label(&p, 0, rule, 0.5).unwrap();
            assert_eq!(pl.class_index, 0);
        }
    }

    #[test]
    fn train_rules_hand_case() {
        // local = [0.6, 0.4], global = [0.1, 0.9]
        let p = pm(&[&[0.6, 0.4], &[0.1, 0.9]]);
        let max = train_pseudo_label(&p, 0, TrainRule::Max, 0.5).unwrap();
        assert_eq!(max.class_index, 1);
        assert!((max.confidence - 0.9).abs() < 1e-12);
        let avg = train_pseudo_label(&p, 0, TrainRule::Avg, 0.5).unwrap();
        assert_eq!(avg.class_index, 1);
        assert!((avg.confidence - 0.65).abs() < 1e-12);
    }

    #[test]
    fn retention_threshold_contract() {
        let low = pm(&[&[0.9, 0.1], &[0.9, 0.1]]);
        let high = pm(&[&[0.96, 0.04], &[0.96, 0.04]]);
        let a = train_pseudo_label(&low, 0, TrainRule::Max, 0.95).unwrap();
        let b = train_pseudo_label(&high, 0, TrainRule::Max, 0.95).unwrap();
        assert!(!a.retained);
        assert!(b.retained);
    }

    #[test]
    fn train_domain_out_of_range() {
        let p = pm(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(
            train_pseudo_label(&p, 1, TrainRule::Max, 0.9),
            Err(FusionError::DomainOutOfRange { .. })
        ));
    }

    #[test]
    fn test_rules_unanimous_case() {
        let col = [0.2, 0.5, 0.3];
        let p = pm(&[&col, &col, &col]);
        for rule in [
            TestRule::GlobalOnly,
            TestRule::Avg,
            TestRule::AvgAll,
            TestRule::Max,
        ] {
            assert_eq!(test_predict(&p, rule).unwrap(), 1);
        }
    }

    #[test]
    fn test_rules_hand_case() {
        // N = 2 locals plus global.
        let p = pm(&[&[0.7, 0.3], &[0.2, 0.8], &[0.45, 0.55]]);
        // select_task picks column 1 (holds the 0.8 global max among locals).
        let (y_max, idx) = select_task(&p.local_columns()).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(y_max, vec![0.2, 0.8]);
        assert_eq!(test_predict(&p, TestRule::Avg).unwrap(), 1);
        assert_eq!(test_predict(&p, TestRule::AvgAll).unwrap(), 1);
        assert_eq!(test_predict(&p, TestRule::GlobalOnly).unwrap(), 1);
        assert_eq!(test_predict(&p, TestRule::Max).unwrap(), 1);
    }

    #[test]
    fn positive_scaling_leaves_decisions_unchanged() {
        // Argmax-level invariance; scaled columns are no longer probability
        // vectors so exercise the raw functions.
        let c0 = [0.5, 0.2, 0.3];
        let c1 = [0.1, 0.45, 0.45];
        let s0: Vec<f64> = c0.iter().map(|v| v * 3.5).collect();
        let s1: Vec<f64> = c1.iter().map(|v| v * 3.5).collect();
        assert_eq!(
            predict_label(&[&c0, &c1]).unwrap(),
            predict_label(&[&s0, &s1]).unwrap()
        );
        let (_, t) = select_task(&[&c0, &c1]).unwrap();
        let (_, ts) = select_task(&[&s0, &s1]).unwrap();
        assert_eq!(t, ts);
    }

    #[test]
    fn permutation_equivariance() {
        // Entries are all distinct: with ties the lowest-index rule wins in
        // whichever order the permutation puts the tied rows.
        let p = pm(&[&[0.50, 0.21, 0.29], &[0.11, 0.62, 0.27], &[0.18, 0.24, 0.58]]);
        let perm = [2usize, 0, 1]; // new row r holds old row perm[r]
        let permuted = pm(&[
            &[0.29, 0.50, 0.21],
            &[0.27, 0.11, 0.62],
            &[0.58, 0.18, 0.24],
        ]);
        for rule in [
            TestRule::GlobalOnly,
            TestRule::Avg,
            TestRule::AvgAll,
            TestRule::Max,
        ] {
            let base = test_predict(&p, rule).unwrap();
            let moved = test_predict(&permuted, rule).unwrap();
            assert_eq!(perm[moved], base, "rule {rule:?}");
        }
    }
}
