//! Synthetic multi-domain classification data with controllable domain
//! shift, plus the weak/strong augmentation operators used for
//! pseudo-label training.
//!
//! Classes are Gaussian clusters around shared prototype vectors in a
//! canonical space; domain `j` then applies an affine transform (block
//! rotation by `j * shift_strength`, uniform scale, offset) to all of its
//! samples. Divergence between two domains therefore grows with their index
//! gap, and `shift_strength = 0` makes every domain identically distributed.
//!
//! Hidden labels of unlabeled samples live behind a dedicated oracle
//! accessor so the training loss path never sees them.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug)]
pub enum DataError {
    InvalidConfig(String),
    /// Statistics mixing fired but no donor statistics were supplied.
    MissingDonorStats,
    Io(String),
    Parse { line: usize, reason: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(reason) => write!(f, "invalid generator config: {reason}"),
            Self::MissingDonorStats => {
                write!(f, "statistics mixing requires donor statistics")
            }
            Self::Io(reason) => write!(f, "dataset io: {reason}"),
            Self::Parse { line, reason } => write!(f, "dataset parse, line {line}: {reason}"),
        }
    }
}

impl std::error::Error for DataError {}

// Generator geometry. Prototypes are regular-simplex vertices at this
// circumradius, clusters use CLUSTER_SIGMA noise. Per unit of drift
// (domain index * shift_strength) the offset moves OFFSET_STEP along one
// fixed direction and the scale shrinks as 1/(1 + SCALE_STEP * drift).
const PROTOTYPE_RADIUS: f64 = 2.6;
const CLUSTER_SIGMA: f64 = 1.0;
const OFFSET_STEP: f64 = 0.6;
const SCALE_STEP: f64 = 0.8;
// At most this many leading coordinate pairs rotate; at the default
// dim of 16 that is all of them.
const ROTATED_PAIRS: usize = 8;

/// Affine transform a domain applies to canonical-space samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub rotation_angle: f64,
    pub scale: f64,
    pub offset: Vec<f64>,
    pub noise_sigma: f64,
}

impl DomainSpec {
    fn identity(domain_id: usize, dim: usize) -> DomainSpec {
        DomainSpec {
            domain_id,
            rotation_angle: 0.0,
            scale: 1.0,
            offset: vec![0.0; dim],
            noise_sigma: 0.0,
        }
    }

    /// Rotate the leading coordinate pairs by `rotation_angle`, scale, then
    /// translate. Coordinates beyond the rotated block are scaled and
    /// shifted only.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (sin, cos) = self.rotation_angle.sin_cos();
        let mut out = x.to_vec();
        let mut i = 0;
        while i + 1 < x.len() && i < 2 * ROTATED_PAIRS {
            out[i] = cos * x[i] - sin * x[i + 1];
            out[i + 1] = sin * x[i] + cos * x[i + 1];
            i += 2;
        }
        for (o, off) in out.iter_mut().zip(&self.offset) {
            *o = self.scale * *o + off;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One domain's labeled pool plus its unlabeled pool. Unlabeled ground
/// truth is reachable only through [`DomainData::oracle_label`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
}

impl DomainData {
    pub fn labeled(&self) -> &[Sample] {
        &self.labeled
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    /// Loss-path view of an unlabeled sample: features only.
    pub fn unlabeled_features(&self, idx: usize) -> &[f64] {
        &self.unlabeled[idx].features
    }

    /// Ground truth of an unlabeled sample. Metrics and audits only; the
    /// trainer must never route this into a loss.
    pub fn oracle_label(&self, idx: usize) -> usize {
        self.unlabeled[idx].label
    }

    /// All samples of the domain with labels, for held-out evaluation.
    pub fn eval_pool(&self) -> Vec<Sample> {
        let mut pool = self.labeled.clone();
        pool.extend(self.unlabeled.iter().cloned());
        pool
    }

    /// Per-coordinate mean and (population) standard deviation over every
    /// sample in the domain. Used as donor statistics for strong
    /// augmentation.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.labeled[0].features.len();
        let all: Vec<&Sample> = self.labeled.iter().chain(self.unlabeled.iter()).collect();
        let n = all.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in &all {
            for (m, &v) in mean.iter_mut().zip(&s.features) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for s in &all {
            for (v, (&x, &m)) in var.iter_mut().zip(s.features.iter().zip(&mean)) {
                let d = x - m;
                *v += d * d;
            }
        }
        let std = var.iter().map(|&v| (v / n).sqrt()).collect();
        (mean, std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    pub domains: Vec<DomainData>,
    pub classes: usize,
    pub dim: usize,
    /// Canonical-space class prototypes (generator provenance; empty after
    /// import).
    prototypes: Vec<Vec<f64>>,
}

impl MultiDomainDataset {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// Prototype of class `c` as seen by domain `j`.
    pub fn domain_prototype(&self, domain: usize, class: usize) -> Vec<f64> {
        self.domains[domain].spec.apply(&self.prototypes[class])
    }

    /// Split off domain `target` as a held-out evaluation pool; remaining
    /// domains are re-indexed 0.. in order.
    pub fn leave_one_out(&self, target: usize) -> (MultiDomainDataset, Vec<Sample>) {
        assert!(target < self.domains.len(), "target domain out of range");
        let mut sources = Vec::new();
        for (j, d) in self.domains.iter().enumerate() {
            if j == target {
                continue;
            }
            let mut d = d.clone();
            d.spec.domain_id = sources.len();
            sources.push(d);
        }
        let target_pool = self.domains[target].eval_pool();
        (
            MultiDomainDataset {
                domains: sources,
                classes: self.classes,
                dim: self.dim,
                prototypes: self.prototypes.clone(),
            },
            target_pool,
        )
    }

    /// Writes the documented tabular export: a header comment followed by
    /// one row per sample (`domain_id split label f0 .. fD-1`).
    pub fn export(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# multidomain dataset: domains={} classes={} dim={}\n",
            self.domains.len(),
            self.classes,
            self.dim
        ));
        for d in &self.domains {
            for s in &d.labeled {
                push_row(&mut out, d.spec.domain_id, "labeled", s);
            }
            for s in &d.unlabeled {
                push_row(&mut out, d.spec.domain_id, "unlabeled", s);
            }
        }
        out
    }

    pub fn export_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.export()).map_err(|e| DataError::Io(e.to_string()))
    }

    /// Parses the tabular export format. Generator provenance (prototypes,
    /// domain transforms) is not part of the format and comes back empty.
    pub fn import(text: &str) -> Result<MultiDomainDataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DataError::Parse {
            line: 1,
            reason: "empty file".to_string(),
        })?;
        let header_fields = parse_header(header)?;
        let (n_domains, classes, dim) = header_fields;
        let mut domains: Vec<DomainData> = (0..n_domains)
            .map(|j| DomainData {
                spec: DomainSpec::identity(j, dim),
                labeled: Vec::new(),
                unlabeled: Vec::new(),
            })
            .collect();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let domain: usize = next_field(&mut parts, lineno, "domain_id")?;
            if domain >= n_domains {
                return Err(DataError::Parse {
                    line: lineno,
                    reason: format!("domain_id {domain} out of range"),
                });
            }
            let split: String = next_field(&mut parts, lineno, "split")?;
            let label: usize = next_field(&mut parts, lineno, "label")?;
            if label >= classes {
                return Err(DataError::Parse {
                    line: lineno,
                    reason: format!("label {label} out of range"),
                });
            }
            let features: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| DataError::Parse {
                        line: lineno,
                        reason: format!("bad feature value {p:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if features.len() != dim {
                return Err(DataError::Parse {
                    line: lineno,
                    reason: format!("expected {dim} features, got {}", features.len()),
                });
            }
            let sample = Sample { features, label };
            match split.as_str() {
                "labeled" => domains[domain].labeled.push(sample),
                "unlabeled" => domains[domain].unlabeled.push(sample),
                other => {
                    return Err(DataError::Parse {
                        line: lineno,
                        reason: format!("unknown split {other:?}"),
                    })
                }
            }
        }
        Ok(MultiDomainDataset {
            domains,
            classes,
            dim,
            prototypes: Vec::new(),
        })
    }

    pub fn import_from(path: &Path) -> Result<MultiDomainDataset> {
        let text = fs::read_to_string(path).map_err(|e| DataError::Io(e.to_string()))?;
        Self::import(&text)
    }
}

fn push_row(out: &mut String, domain: usize, split: &str, s: &Sample) {
    out.push_str(&format!("{domain} {split} {}", s.label));
    for v in &s.features {
        out.push_str(&format!(" {v}"));
    }
    out.push('\n');
}

fn parse_header(header: &str) -> Result<(usize, usize, usize)> {
    let err = |reason: &str| DataError::Parse {
        line: 1,
        reason: reason.to_string(),
    };
    let mut n = None;
    let mut c = None;
    let mut d = None;
    for tok in header.split_whitespace() {
        if let Some((key, val)) = tok.split_once('=') {
            let val: usize = val.parse().map_err(|_| err("bad header value"))?;
            match key {
                "domains" => n = Some(val),
                "classes" => c = Some(val),
                "dim" => d = Some(val),
                _ => {}
            }
        }
    }
    match (n, c, d) {
        (Some(n), Some(c), Some(d)) => Ok((n, c, d)),
        _ => Err(err("header must carry domains=, classes=, dim=")),
    }
}

fn next_field<T: std::str::FromStr>(
    parts: &mut std::str::SplitWhitespace<'_>,
    line: usize,
    name: &str,
) -> Result<T> {
    parts
        .next()
        .ok_or(DataError::Parse {
            line,
            reason: format!("missing {name}"),
        })?
        .parse()
        .map_err(|_| DataError::Parse {
            line,
            reason: format!("bad {name}"),
        })
}

/// Builds an `n_domains`-domain dataset. Identical arguments (seed
/// included) produce a bit-identical dataset.
pub fn generate(
    seed: u64,
    n_domains: usize,
    classes: usize,
    dim: usize,
    per_class_labeled: usize,
    per_class_unlabeled: usize,
    shift_strength: f64,
) -> Result<MultiDomainDataset> {
    if n_domains < 2 {
        return Err(DataError::InvalidConfig("need at least 2 domains".into()));
    }
    if classes < 2 {
        return Err(DataError::InvalidConfig("need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(DataError::InvalidConfig("need dim >= 2".into()));
    }
    if per_class_labeled == 0 {
        return Err(DataError::InvalidConfig(
            "per_class_labeled must be positive".into(),
        ));
    }
    if !shift_strength.is_finite() || shift_strength < 0.0 {
        return Err(DataError::InvalidConfig(
            "shift_strength must be non-negative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_normal = Normal::new(0.0, 1.0).expect("valid normal");

    if classes > dim {
        return Err(DataError::InvalidConfig(
            "need dim >= classes for the prototype simplex".into(),
        ));
    }
    // Prototypes sit at the vertices of a regular simplex (equal pairwise
    // separation), randomly rotated per seed.
    let prototypes = simplex_prototypes(&mut rng, classes, dim);

    // Shared offset direction; domain j moves j * shift_strength * OFFSET_STEP
    // along it.
    let offset_dir: Vec<f64> = {
        let raw: Vec<f64> = (0..dim).map(|_| unit_normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        raw.iter().map(|v| v / norm).collect()
    };

    let cluster = Normal::new(0.0, CLUSTER_SIGMA).expect("valid normal");
    let mut domains = Vec::with_capacity(n_domains);
    for j in 0..n_domains {
        let drift = j as f64 * shift_strength;
        let spec = DomainSpec {
            domain_id: j,
            rotation_angle: drift,
            scale: (1.0 + SCALE_STEP * drift).recip(),
            offset: offset_dir.iter().map(|v| v * OFFSET_STEP * drift).collect(),
            noise_sigma: CLUSTER_SIGMA,
        };
        let draw = |class: usize, rng: &mut ChaCha8Rng| -> Sample {
            let canonical: Vec<f64> = prototypes[class]
                .iter()
                .map(|&p| p + cluster.sample(rng))
                .collect();
            Sample {
                features: spec.apply(&canonical),
                label: class,
            }
        };
        let mut labeled = Vec::with_capacity(classes * per_class_labeled);
        let mut unlabeled = Vec::with_capacity(classes * per_class_unlabeled);
        for class in 0..classes {
            for _ in 0..per_class_labeled {
                labeled.push(draw(class, &mut rng));
            }
            for _ in 0..per_class_unlabeled {
                unlabeled.push(draw(class, &mut rng));
            }
        }
        domains.push(DomainData {
            spec,
            labeled,
            unlabeled,
        });
    }

    Ok(MultiDomainDataset {
        domains,
        classes,
        dim,
        prototypes,
    })
}

/// Vertices of a regular `count`-point simplex of circumradius
/// `PROTOTYPE_RADIUS`, pushed through a random rotation.
fn simplex_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let unit_normal = Normal::new(0.0, 1.0).expect("valid normal");
    // Random orthonormal frame over the first `count` coordinates by
    // Gram-Schmidt on Gaussian draws.
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| unit_normal.sample(rng)).collect();
        for b in &frame {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        frame.push(v);
    }
    // Centered simplex vertices in `count`-dim coordinates, unit norm:
    // v_i = sqrt(c/(c-1)) * (e_i - 1/c).
    let c = count as f64;
    let scale = (c / (c - 1.0)).sqrt();
    (0..count)
        .map(|i| {
            let mut out = vec![0.0; dim];
            for (k, basis) in frame.iter().enumerate() {
                let coord = scale * (if k == i { 1.0 } else { 0.0 } - 1.0 / c);
                for (o, b) in out.iter_mut().zip(basis) {
                    *o += PROTOTYPE_RADIUS * coord * b;
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    Weak,
    Strong,
}

/// Input perturbation operator. Weak is jitter only; strong adds coordinate
/// dropout and optional feature-statistics mixing toward a donor domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationOp {
    pub kind: AugKind,
    pub jitter_sigma: f64,
    pub dropout_prob: f64,
    pub stat_mix_prob: f64,
}

impl AugmentationOp {
    pub fn weak(jitter_sigma: f64) -> AugmentationOp {
        AugmentationOp {
            kind: AugKind::Weak,
            jitter_sigma,
            dropout_prob: 0.0,
            stat_mix_prob: 0.0,
        }
    }

    pub fn strong(jitter_sigma: f64, dropout_prob: f64, stat_mix_prob: f64) -> AugmentationOp {
        AugmentationOp {
            kind: AugKind::Strong,
            jitter_sigma,
            dropout_prob,
            stat_mix_prob,
        }
    }
}

/// Applies `op` to one feature vector. A pure function of
/// `(x, op, donor_stats, seed)`.
///
/// Statistics mixing standardizes the (already jittered/dropped) vector by
/// its own scalar mean/std across coordinates and re-expresses it in the
/// donor's per-coordinate statistics.
pub fn augment(
    x: &[f64],
    op: &AugmentationOp,
    donor_stats: Option<(&[f64], &[f64])>,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.to_vec();
    if op.jitter_sigma > 0.0 {
        let jitter = Normal::new(0.0, op.jitter_sigma).expect("valid normal");
        for v in out.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    if op.kind == AugKind::Strong {
        if op.dropout_prob > 0.0 {
            for v in out.iter_mut() {
                if rng.random::<f64>() < op.dropout_prob {
                    *v = 0.0;
                }
            }
        }
        if op.stat_mix_prob > 0.0 && rng.random::<f64>() < op.stat_mix_prob {
            let (donor_mean, donor_std) = donor_stats.ok_or(DataError::MissingDonorStats)?;
            let n = out.len() as f64;
            let mean = out.iter().sum::<f64>() / n;
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-8);
            for (i, v) in out.iter_mut().enumerate() {
                *v = (*v - mean) / std * donor_std[i] + donor_mean[i];
            }
        }
    }
    Ok(out)
}
