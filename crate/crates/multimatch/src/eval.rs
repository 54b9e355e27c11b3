//! Quality metrics, pseudo-label audits, a domain-discrepancy proxy, and a
//! numeric evaluator of the multi-domain generalization bound.
//!
//! The bound evaluator is a numeric illustration, not a certified bound:
//! the capacity proxy `d` is user-supplied and the per-domain `lambda`
//! estimates come from training small reference models.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Sample;
use crate::model::{Affine, ModelError};
use crate::tensor::{sgd_step, Graph, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug)]
pub enum EvalError {
    EmptyAudit,
    ClassOutOfRange { class: usize, classes: usize },
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    InvalidInputs(String),
    TooFewSamples { got: usize, need: usize },
    Model(ModelError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyAudit => write!(f, "audit list is empty"),
            Self::ClassOutOfRange { class, classes } => {
                write!(f, "class {class} out of range for {classes} classes")
            }
            Self::LengthMismatch { what, expected, got } => {
                write!(f, "{what}: expected length {expected}, got {got}")
            }
            Self::InvalidInputs(reason) => write!(f, "invalid bound inputs: {reason}"),
            Self::TooFewSamples { got, need } => {
                write!(f, "need at least {need} samples per domain, got {got}")
            }
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Model(ModelError::Tensor(e))
    }
}

/// Per-class confusion counters over an audit of (predicted, true) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionStats {
    pub classes: usize,
    pub tp: Vec<usize>,
    pub tn: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub total: usize,
}

impl ConfusionStats {
    pub fn from_audit(audit: &[(usize, usize)], classes: usize) -> Result<ConfusionStats> {
        if audit.is_empty() {
            return Err(EvalError::EmptyAudit);
        }
        for &(p, t) in audit {
            for class in [p, t] {
                if class >= classes {
                    return Err(EvalError::ClassOutOfRange { class, classes });
                }
            }
        }
        let mut stats = ConfusionStats {
            classes,
            tp: vec![0; classes],
            tn: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            total: audit.len(),
        };
        for &(pred, truth) in audit {
            for c in 0..classes {
                match (pred == c, truth == c) {
                    (true, true) => stats.tp[c] += 1,
                    (true, false) => stats.fp[c] += 1,
                    (false, true) => stats.fn_[c] += 1,
                    (false, false) => stats.tn[c] += 1,
                }
            }
        }
        Ok(stats)
    }

    pub fn correct(&self) -> usize {
        self.tp.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabelMetrics {
    /// Fraction of correctly predicted samples, times 100.
    pub precision: f64,
    /// Mean per-class recall, times 100.
    pub recall: f64,
    /// Mean per-class F1, times 100. Degenerate classes score 0.
    pub macro_f1: f64,
}

/// Precision/recall/macro-F1 of an audit of (predicted, true) pairs.
pub fn pseudo_label_metrics(
    audit: &[(usize, usize)],
    classes: usize,
) -> Result<PseudoLabelMetrics> {
    let stats = ConfusionStats::from_audit(audit, classes)?;
    let precision = 100.0 * stats.correct() as f64 / stats.total as f64;
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = stats.tp[c] as f64;
        let recall_den = tp + stats.fn_[c] as f64;
        let prec_den = tp + stats.fp[c] as f64;
        let recall_c = if recall_den > 0.0 { tp / recall_den } else { 0.0 };
        let prec_c = if prec_den > 0.0 { tp / prec_den } else { 0.0 };
        let f1_c = if prec_c + recall_c > 0.0 {
            2.0 * prec_c * recall_c / (prec_c + recall_c)
        } else {
            0.0
        };
        recall_sum += recall_c;
        f1_sum += f1_c;
    }
    Ok(PseudoLabelMetrics {
        precision,
        recall: 100.0 * recall_sum / classes as f64,
        macro_f1: 100.0 * f1_sum / classes as f64,
    })
}

/// Weighted 0-1 error of a predictor across domains:
/// `sum_j alpha_j / m_j * sum_{x in S_j} [h(x) != y]`.
pub fn empirical_weighted_error<F>(predict: F, domains: &[&[Sample]], alpha: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> usize,
{
    if alpha.len() != domains.len() {
        return Err(EvalError::LengthMismatch {
            what: "alpha",
            expected: domains.len(),
            got: alpha.len(),
        });
    }
    let mut total = 0.0;
    for (a, samples) in alpha.iter().zip(domains) {
        if samples.is_empty() {
            return Err(EvalError::TooFewSamples { got: 0, need: 1 });
        }
        let wrong = samples
            .iter()
            .filter(|s| predict(&s.features) != s.label)
            .count();
        total += a * wrong as f64 / samples.len() as f64;
    }
    Ok(total)
}

const DISCRIMINATOR_HIDDEN: usize = 8;
const DISCRIMINATOR_ITERS: usize = 200;
const DISCRIMINATOR_LR: f64 = 0.05;

/// Parameter count of the domain discriminator; the default capacity proxy
/// for the bound evaluator.
pub fn discriminator_param_count(dim: usize) -> usize {
    dim * DISCRIMINATOR_HIDDEN + DISCRIMINATOR_HIDDEN + DISCRIMINATOR_HIDDEN * 2 + 2
}

struct Mlp {
    hidden: Affine,
    out: Affine,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, classes: usize) -> Result<Mlp> {
        Ok(Mlp {
            hidden: Affine::init(rng, dim, hidden)?,
            out: Affine::init(rng, hidden, classes)?,
        })
    }

    fn logits(&self, graph: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(graph, x)?;
        let h = graph.relu(&h)?;
        Ok(self.out.forward(graph, &h)?)
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.hidden.weight.clone(),
            self.hidden.bias.clone(),
            self.out.weight.clone(),
            self.out.bias.clone(),
        ]
    }

    fn fit(&self, xs: &Tensor, labels: &Tensor, batch: usize) -> Result<()> {
        let weights = vec![1.0; batch];
        for _ in 0..DISCRIMINATOR_ITERS {
            let mut graph = Graph::new();
            let logits = self.logits(&mut graph, xs)?;
            let loss = graph.softmax_cross_entropy(&logits, labels, &weights)?;
            graph.backward(&loss)?;
            sgd_step(&self.params(), DISCRIMINATOR_LR)?;
        }
        Ok(())
    }

    fn predict(&self, x: &[f64], dim: usize) -> Result<usize> {
        let mut graph = Graph::new();
        let input = Tensor::new(&[1, dim], x.to_vec())?;
        let logits = self.logits(&mut graph, &input)?;
        Ok(logits.with_data(|d| {
            let mut best = 0;
            for (i, &v) in d.iter().enumerate().skip(1) {
                if v > d[best] {
                    best = i;
                }
            }
            best
        }))
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * classes + l] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), classes], data)?)
}

/// Proxy A-distance between two sample sets.
///
/// Trains a small binary domain discriminator on half of the (balanced)
/// pooled data, measures its held-out error `e`, and returns
/// `max(0, 2 * (1 - 2e))`: 0 for indistinguishable domains, 2 for
/// perfectly separable ones.
pub fn proxy_divergence(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<f64> {
    let n = a.len().min(b.len());
    if n < 4 {
        return Err(EvalError::TooFewSamples {
            got: n,
            need: 4,
        });
    }
    let dim = a[0].len();
    let mut pool: Vec<(&[f64], usize)> = Vec::with_capacity(2 * n);
    for x in a.iter().take(n) {
        pool.push((x.as_slice(), 0));
    }
    for x in b.iter().take(n) {
        pool.push((x.as_slice(), 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let half = pool.len() / 2;
    let (train, test) = pool.split_at(half);

    let mut flat = Vec::with_capacity(train.len() * dim);
    let mut labels = Vec::with_capacity(train.len());
    for (x, l) in train {
        flat.extend_from_slice(x);
        labels.push(*l);
    }
    let xs = Tensor::new(&[train.len(), dim], flat)?;
    let ys = one_hot(&labels, 2)?;
    let disc = Mlp::init(&mut rng, dim, DISCRIMINATOR_HIDDEN, 2)?;
    disc.fit(&xs, &ys, train.len())?;

    let mut wrong = 0;
    for (x, l) in test {
        if disc.predict(x, dim)? != *l {
            wrong += 1;
        }
    }
    let err = wrong as f64 / test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).max(0.0))
}

const LAMBDA_ITERS: usize = 300;
const LAMBDA_LR: f64 = 0.05;
const LAMBDA_HIDDEN: usize = 16;

/// Estimates `lambda_j = min_h (err_target(h) + err_j(h))` by fitting one
/// small reference classifier on the union of both sets and summing its two
/// error rates. An estimate, not a minimum.
pub fn estimate_lambda(
    domain: &[Sample],
    target: &[Sample],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    if domain.is_empty() || target.is_empty() {
        return Err(EvalError::TooFewSamples { got: 0, need: 1 });
    }
    let dim = domain[0].features.len();
    let union: Vec<&Sample> = domain.iter().chain(target.iter()).collect();
    let mut flat = Vec::with_capacity(union.len() * dim);
    let mut labels = Vec::with_capacity(union.len());
    for s in &union {
        flat.extend_from_slice(&s.features);
        labels.push(s.label);
    }
    let xs = Tensor::new(&[union.len(), dim], flat)?;
    let ys = one_hot(&labels, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = Mlp::init(&mut rng, dim, LAMBDA_HIDDEN, classes)?;
    let weights = vec![1.0; union.len()];
    for _ in 0..LAMBDA_ITERS {
        let mut graph = Graph::new();
        let logits = mlp.logits(&mut graph, &xs)?;
        let loss = graph.softmax_cross_entropy(&logits, &ys, &weights)?;
        graph.backward(&loss)?;
        sgd_step(&mlp.params(), LAMBDA_LR)?;
    }
    let err = |set: &[Sample]| -> Result<f64> {
        let mut wrong = 0;
        for s in set {
            if mlp.predict(&s.features, dim)? != s.label {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / set.len() as f64)
    };
    Ok(err(domain)? + err(target)?)
}

/// Inputs of the multi-domain generalization bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundInputs {
    pub n_domains: usize,
    /// Total labeled sample count `m`.
    pub total_samples: usize,
    /// Domain weights, summing to 1.
    pub alpha: Vec<f64>,
    /// Per-domain sample fractions, summing to 1 (`m_j = beta_j * m`).
    pub beta: Vec<f64>,
    /// Capacity proxy `d` (e.g. a parameter count).
    pub vc_proxy: f64,
    pub delta: f64,
    /// Per-domain joint-error estimates.
    pub lambda: Vec<f64>,
    /// Per-domain divergence estimates, each >= 0.
    pub divergence: Vec<f64>,
    /// Error of the best-in-class target hypothesis.
    pub target_opt_error: f64,
}

impl BoundInputs {
    pub fn uniform(
        n_domains: usize,
        total_samples: usize,
        vc_proxy: f64,
        delta: f64,
        lambda: Vec<f64>,
        divergence: Vec<f64>,
        target_opt_error: f64,
    ) -> BoundInputs {
        let w = 1.0 / n_domains as f64;
        BoundInputs {
            n_domains,
            total_samples,
            alpha: vec![w; n_domains],
            beta: vec![w; n_domains],
            vc_proxy,
            delta,
            lambda,
            divergence,
            target_opt_error,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(EvalError::InvalidInputs(reason));
        if self.n_domains == 0 {
            return bad("need at least one domain".into());
        }
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if v.len() != self.n_domains {
                return bad(format!("{name} must have one entry per domain"));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("{name} must sum to 1, got {sum}"));
            }
            if v.iter().any(|&x| x < 0.0) {
                return bad(format!("{name} entries must be non-negative"));
            }
        }
        if self.lambda.len() != self.n_domains || self.divergence.len() != self.n_domains {
            return bad("lambda and divergence must have one entry per domain".into());
        }
        if self.divergence.iter().any(|&x| x < 0.0) {
            return bad("divergence estimates must be non-negative".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if self.vc_proxy <= 0.0 {
            return bad("capacity proxy must be positive".into());
        }
        if self.total_samples == 0 {
            return bad("need at least one sample".into());
        }
        for (j, &b) in self.beta.iter().enumerate() {
            if b * (self.total_samples as f64) < 1.0 - 1e-9 {
                return bad(format!("domain {j}: beta_j * m must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Itemized evaluation of the bound, serializable as the JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub uniform: bool,
    pub target_opt_error: f64,
    pub complexity_term: f64,
    pub lambda_term: f64,
    pub divergence_term: f64,
    pub total: f64,
    pub note: String,
}

/// Upper bound on the target-domain generalization error:
/// `eps_T(h*) + 2 sqrt((sum_j alpha_j^2 / beta_j) (d ln(2m) + ln(2/delta)) / (2m))
///  + sum_j alpha_j (2 lambda_j + divergence_j)`.
///
/// With `uniform` set, all `alpha_j` and `beta_j` are forced to `1/N`.
pub fn bound_upper(inputs: &BoundInputs, uniform: bool) -> Result<f64> {
    Ok(bound_report(inputs, uniform)?.total)
}

pub fn bound_report(inputs: &BoundInputs, uniform: bool) -> Result<BoundReport> {
    inputs.validate()?;
    let n = inputs.n_domains as f64;
    let (alpha, beta): (Vec<f64>, Vec<f64>) = if uniform {
        (vec![1.0 / n; inputs.n_domains], vec![1.0 / n; inputs.n_domains])
    } else {
        (inputs.alpha.clone(), inputs.beta.clone())
    };
    let m = inputs.total_samples as f64;
    let weight_ratio: f64 = alpha
        .iter()
        .zip(&beta)
        .map(|(&a, &b)| {
            if b > 0.0 {
                a * a / b
            } else {
                0.0
            }
        })
        .sum();
    let complexity = 2.0
        * (weight_ratio * (inputs.vc_proxy * (2.0 * m).ln() + (2.0 / inputs.delta).ln())
            / (2.0 * m))
            .sqrt();
    let lambda_term: f64 = alpha
        .iter()
        .zip(&inputs.lambda)
        .map(|(&a, &l)| a * 2.0 * l)
        .sum();
    let divergence_term: f64 = alpha
        .iter()
        .zip(&inputs.divergence)
        .map(|(&a, &d)| a * d)
        .sum();
    let total = inputs.target_opt_error + complexity + lambda_term + divergence_term;
    Ok(BoundReport {
        inputs: inputs.clone(),
        uniform,
        target_opt_error: inputs.target_opt_error,
        complexity_term: complexity,
        lambda_term,
        divergence_term,
        total,
        note: "confidence term uses ln(2/delta); a literal log(delta) would be negative for \
               delta < 1 and could make the radicand negative"
            .to_string(),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
