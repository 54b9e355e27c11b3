//! Dense `f64` tensors plus a recorded operation graph for reverse-mode
//! differentiation.
//!
//! The engine is deliberately small: row-major buffers, eager execution, and
//! a tape of executed ops that [`Graph::backward`] replays in reverse. Every
//! op validates shapes up front and rejects non-finite results, so a
//! diverging training run surfaces as an error instead of NaN propagation.
//!
//! Tensors are cheaply cloneable handles (`Rc` inside); cloning shares the
//! underlying buffer and gradient. Parameters are ordinary tensors created
//! with [`Tensor::param`]; their gradients accumulate across backward passes
//! and are cleared only by [`sgd_step`].

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes do not satisfy the op's contract.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Shape/data pair is malformed (zero dim, length mismatch).
    InvalidShape { reason: String },
    /// An op produced NaN or infinity.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar tensor.
    NotScalar { shape: Vec<usize> },
    /// `sgd_step` found a parameter without an accumulated gradient.
    MissingGrad,
    /// Input violates an op precondition (bad labels, negative weights, ...).
    Contract { op: &'static str, reason: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::InvalidShape { reason } => write!(f, "invalid tensor shape: {reason}"),
            Self::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Self::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::MissingGrad => write!(f, "parameter has no accumulated gradient"),
            Self::Contract { op, reason } => write!(f, "{op}: {reason}"),
        }
    }
}

impl std::error::Error for TensorError {}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a dense row-major `f64` buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &inner.data)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            reason: format!("dimensions must be positive, got {shape:?}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(TensorError::InvalidShape {
            reason: format!("shape {shape:?} expects {numel} values, got {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    /// A trainable tensor: `requires_grad` set, gradient buffer zeroed.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            let n = inner.data.len();
            inner.grad = Some(vec![0.0; n]);
        }
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(&[1], vec![value])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the buffer. For read-only access without a copy use [`Tensor::with_data`].
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1);
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        if inner.requires_grad {
            inner.grad = Some(vec![0.0; n]);
        } else {
            inner.grad = None;
        }
    }

    /// Two handles to the same underlying buffer?
    pub fn same_as(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        debug_assert_eq!(contribution.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn reset_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        inner.grad = Some(vec![0.0; n]);
    }

    fn apply_sgd(&self, lr: f64) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.take().ok_or(TensorError::MissingGrad)?;
        for (p, g) in inner.data.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        inner.grad = Some(vec![0.0; n]);
        Ok(())
    }

    fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

/// Numerically safe softmax of one row (max subtraction before exp).
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

enum Op {
    MatMul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Scale {
        a: Tensor,
        factor: f64,
        out: Tensor,
    },
    Relu {
        a: Tensor,
        out: Tensor,
    },
    AddBias {
        a: Tensor,
        bias: Tensor,
        out: Tensor,
    },
    Sum {
        a: Tensor,
        out: Tensor,
    },
    SoftmaxXent {
        logits: Tensor,
        /// Per-row softmax probabilities, saved at forward time.
        probs: Vec<f64>,
        labels: Vec<f64>,
        weights: Vec<f64>,
        /// Count of samples with positive weight (the averaging denominator).
        denom: f64,
        out: Tensor,
    },
    BatchNormTrain {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        out: Tensor,
    },
    BatchNormEval {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        out: Tensor,
    },
}

impl Op {
    fn output(&self) -> &Tensor {
        match self {
            Op::MatMul { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Relu { out, .. }
            | Op::AddBias { out, .. }
            | Op::Sum { out, .. }
            | Op::SoftmaxXent { out, .. }
            | Op::BatchNormTrain { out, .. }
            | Op::BatchNormEval { out, .. } => out,
        }
    }
}

/// Ordered record of executed ops. Creation order is topological order, so the
/// backward pass is a single reverse sweep that visits each op exactly once.
#[derive(Default)]
pub struct Graph {
    records: Vec<Op>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn finish(&mut self, op_name: &'static str, op: Op) -> Result<Tensor> {
        let out = op.output().clone();
        if !out.with_data(|d| d.iter().all(|v| v.is_finite())) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.records.push(op);
        Ok(out)
    }

    fn fresh(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        let t = Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: None,
            })),
        };
        t
    }

    /// `a[m,k] * b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = a.with_data(|ad| b.with_data(|bd| matmul_raw(ad, bd, m, k, n)));
        let rg = a.requires_grad() || b.requires_grad();
        let out = Self::fresh(&[m, n], data, rg);
        self.finish(
            "matmul",
            Op::MatMul {
                a: a.clone(),
                b: b.clone(),
                out,
            },
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        wrap: impl Fn(Tensor, Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        // Equal shapes, or a single-element tensor broadcast against the other side.
        let out_shape = if sa == sb {
            sa.clone()
        } else if a.is_scalar() {
            sb.clone()
        } else if b.is_scalar() {
            sa.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        let data = a.with_data(|ad| {
            b.with_data(|bd| {
                let n = out_shape.iter().product();
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let av = if ad.len() == 1 { ad[0] } else { ad[i] };
                    let bv = if bd.len() == 1 { bd[0] } else { bd[i] };
                    out.push(f(av, bv));
                }
                out
            })
        });
        let rg = a.requires_grad() || b.requires_grad();
        let out = Self::fresh(&out_shape, data, rg);
        self.finish(name, wrap(a.clone(), b.clone(), out))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let data = a.with_data(|ad| ad.iter().map(|v| v * factor).collect());
        let out = Self::fresh(&a.shape(), data, a.requires_grad());
        self.finish(
            "scale",
            Op::Scale {
                a: a.clone(),
                factor,
                out,
            },
        )
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.with_data(|ad| ad.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect());
        let out = Self::fresh(&a.shape(), data, a.requires_grad());
        self.finish("relu", Op::Relu { a: a.clone(), out })
    }

    /// Add a length-`n` bias vector to every row of `a[m,n]`.
    pub fn add_bias(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), bias.shape());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let data = a.with_data(|ad| {
            bias.with_data(|bd| {
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        out.push(ad[i * n + j] + bd[j]);
                    }
                }
                out
            })
        });
        let rg = a.requires_grad() || bias.requires_grad();
        let out = Self::fresh(&[m, n], data, rg);
        self.finish(
            "add_bias",
            Op::AddBias {
                a: a.clone(),
                bias: bias.clone(),
                out,
            },
        )
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let total = a.with_data(|ad| ad.iter().sum());
        let out = Self::fresh(&[1], vec![total], a.requires_grad());
        self.finish("sum", Op::Sum { a: a.clone(), out })
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel() as f64;
        let s = self.sum(a)?;
        self.scale(&s, 1.0 / n)
    }

    /// Weighted masked cross-entropy over softmaxed logit rows.
    ///
    /// Rows whose label vector is all zero are masked out and contribute
    /// nothing. The result is the mean over samples with positive weight of
    /// `weight * CE(softmax(logits_row), label_row)`; if no weight is
    /// positive the loss is exactly zero. Labels and weights carry no
    /// gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor,
        labels: &Tensor,
        weights: &[f64],
    ) -> Result<Tensor> {
        let (sl, sy) = (logits.shape(), labels.shape());
        if sl.len() != 2 || sy != sl {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: sl,
                rhs: sy,
            });
        }
        let (b, c) = (sl[0], sl[1]);
        if weights.len() != b {
            return Err(TensorError::Contract {
                op: "softmax_cross_entropy",
                reason: format!("expected {b} weights, got {}", weights.len()),
            });
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(TensorError::Contract {
                op: "softmax_cross_entropy",
                reason: "weights must be finite and non-negative".to_string(),
            });
        }
        let label_data = labels.data();
        for row in 0..b {
            let r = &label_data[row * c..(row + 1) * c];
            let ones = r.iter().filter(|&&v| v == 1.0).count();
            let zeros = r.iter().filter(|&&v| v == 0.0).count();
            if ones + zeros != c || ones > 1 {
                return Err(TensorError::Contract {
                    op: "softmax_cross_entropy",
                    reason: format!("label row {row} is neither one-hot nor all-zero"),
                });
            }
        }

        let denom = weights.iter().filter(|&&w| w > 0.0).count() as f64;
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        logits.with_data(|ld| {
            for row in 0..b {
                let z = &ld[row * c..(row + 1) * c];
                let p = softmax_row(z);
                probs[row * c..(row + 1) * c].copy_from_slice(&p);
                let lr = &label_data[row * c..(row + 1) * c];
                let masked = lr.iter().all(|&v| v == 0.0);
                if weights[row] > 0.0 && !masked {
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                    let picked: f64 = z.iter().zip(lr).map(|(&zv, &lv)| zv * lv).sum();
                    total += weights[row] * (lse - picked);
                }
            }
        });
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        let out = Self::fresh(&[1], vec![loss], logits.requires_grad());
        self.finish(
            "softmax_cross_entropy",
            Op::SoftmaxXent {
                logits: logits.clone(),
                probs,
                labels: label_data,
                weights: weights.to_vec(),
                denom,
                out,
            },
        )
    }

    /// Batch normalization from batch statistics (training mode).
    ///
    /// Normalizes each column of `x[b,h]` by its batch mean and biased
    /// variance, then applies the `gamma`/`beta` affine map. Returns the
    /// normalized tensor together with the batch mean and variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        epsilon: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (sx, sg, sb) = (x.shape(), gamma.shape(), beta.shape());
        if sx.len() != 2 || sg.len() != 1 || sb.len() != 1 || sg[0] != sx[1] || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_train",
                lhs: sx,
                rhs: sg,
            });
        }
        let (b, h) = (sx[0], sx[1]);
        let bf = b as f64;
        let mut mean = vec![0.0; h];
        let mut var = vec![0.0; h];
        x.with_data(|xd| {
            for row in 0..b {
                for col in 0..h {
                    mean[col] += xd[row * h + col];
                }
            }
            for m in mean.iter_mut() {
                *m /= bf;
            }
            for row in 0..b {
                for col in 0..h {
                    let d = xd[row * h + col] - mean[col];
                    var[col] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= bf;
            }
        });
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; b * h];
        let mut data = vec![0.0; b * h];
        x.with_data(|xd| {
            gamma.with_data(|gd| {
                beta.with_data(|bd| {
                    for row in 0..b {
                        for col in 0..h {
                            let i = row * h + col;
                            let xh = (xd[i] - mean[col]) * inv_std[col];
                            xhat[i] = xh;
                            data[i] = gd[col] * xh + bd[col];
                        }
                    }
                })
            })
        });
        let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = Self::fresh(&[b, h], data, rg);
        let out = self.finish(
            "batch_norm_train",
            Op::BatchNormTrain {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                out,
            },
        )?;
        Ok((out, mean, var))
    }

    /// Batch normalization from fixed (running) statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        epsilon: f64,
    ) -> Result<Tensor> {
        let (sx, sg) = (x.shape(), gamma.shape());
        if sx.len() != 2 || sg.len() != 1 || sg[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: sx,
                rhs: sg,
            });
        }
        let (b, h) = (sx[0], sx[1]);
        if running_mean.len() != h || running_var.len() != h {
            return Err(TensorError::Contract {
                op: "batch_norm_eval",
                reason: format!("running statistics must have length {h}"),
            });
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / (v + epsilon).sqrt())
            .collect();
        let mut xhat = vec![0.0; b * h];
        let mut data = vec![0.0; b * h];
        x.with_data(|xd| {
            gamma.with_data(|gd| {
                beta.with_data(|bd| {
                    for row in 0..b {
                        for col in 0..h {
                            let i = row * h + col;
                            let xh = (xd[i] - running_mean[col]) * inv_std[col];
                            xhat[i] = xh;
                            data[i] = gd[col] * xh + bd[col];
                        }
                    }
                })
            })
        });
        let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = Self::fresh(&[b, h], data, rg);
        self.finish(
            "batch_norm_eval",
            Op::BatchNormEval {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                out,
            },
        )
    }

    /// Reverse sweep: populates `grad` of every `requires_grad` tensor that
    /// `loss` depends on with `d loss / d tensor`. Gradients of leaf tensors
    /// accumulate additively across calls; intermediate results are reset at
    /// the start of each sweep.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: loss.shape(),
            });
        }
        // Op outputs are transient within this graph: reset them so repeated
        // sweeps do not compound intermediate gradients. Leaves keep theirs.
        for rec in &self.records {
            rec.output().reset_grad();
        }
        loss.accumulate_grad(&[1.0]);

        for rec in self.records.iter().rev() {
            let g = match rec.output().grad() {
                Some(g) => g,
                None => continue,
            };
            match rec {
                Op::MatMul { a, b, out: _ } => {
                    let (sa, sb) = (a.shape(), b.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if a.requires_grad() {
                        // dA = G * B^T
                        let da = b.with_data(|bd| {
                            let mut da = vec![0.0; m * k];
                            for i in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    for j in 0..n {
                                        s += g[i * n + j] * bd[p * n + j];
                                    }
                                    da[i * k + p] = s;
                                }
                            }
                            da
                        });
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        // dB = A^T * G
                        let db = a.with_data(|ad| {
                            let mut db = vec![0.0; k * n];
                            for p in 0..k {
                                for i in 0..m {
                                    let av = ad[i * k + p];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    for j in 0..n {
                                        db[p * n + j] += av * g[i * n + j];
                                    }
                                }
                            }
                            db
                        });
                        b.accumulate_grad(&db);
                    }
                }
                Op::Add { a, b, .. } => {
                    if a.requires_grad() {
                        a.accumulate_grad(&reduce_to(&g, a.numel()));
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(&reduce_to(&g, b.numel()));
                    }
                }
                Op::Sub { a, b, .. } => {
                    if a.requires_grad() {
                        a.accumulate_grad(&reduce_to(&g, a.numel()));
                    }
                    if b.requires_grad() {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        b.accumulate_grad(&reduce_to(&neg, b.numel()));
                    }
                }
                Op::Mul { a, b, .. } => {
                    if a.requires_grad() {
                        let da = b.with_data(|bd| scale_by(&g, bd));
                        a.accumulate_grad(&reduce_to(&da, a.numel()));
                    }
                    if b.requires_grad() {
                        let db = a.with_data(|ad| scale_by(&g, ad));
                        b.accumulate_grad(&reduce_to(&db, b.numel()));
                    }
                }
                Op::Scale { a, factor, .. } => {
                    if a.requires_grad() {
                        let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                        a.accumulate_grad(&da);
                    }
                }
                Op::Relu { a, .. } => {
                    if a.requires_grad() {
                        // Subgradient 0 at exactly 0.
                        let da = a.with_data(|ad| {
                            g.iter()
                                .zip(ad)
                                .map(|(&gv, &av)| if av > 0.0 { gv } else { 0.0 })
                                .collect::<Vec<f64>>()
                        });
                        a.accumulate_grad(&da);
                    }
                }
                Op::AddBias { a, bias, .. } => {
                    if a.requires_grad() {
                        a.accumulate_grad(&g);
                    }
                    if bias.requires_grad() {
                        let sa = a.shape();
                        let (m, n) = (sa[0], sa[1]);
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                        bias.accumulate_grad(&db);
                    }
                }
                Op::Sum { a, .. } => {
                    if a.requires_grad() {
                        let da = vec![g[0]; a.numel()];
                        a.accumulate_grad(&da);
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    labels,
                    weights,
                    denom,
                    ..
                } => {
                    if logits.requires_grad() && *denom > 0.0 {
                        let sl = logits.shape();
                        let (b, c) = (sl[0], sl[1]);
                        let mut dz = vec![0.0; b * c];
                        for row in 0..b {
                            let lr = &labels[row * c..(row + 1) * c];
                            let masked = lr.iter().all(|&v| v == 0.0);
                            if weights[row] > 0.0 && !masked {
                                let f = g[0] * weights[row] / denom;
                                for col in 0..c {
                                    let i = row * c + col;
                                    dz[i] = f * (probs[i] - lr[col]);
                                }
                            }
                        }
                        logits.accumulate_grad(&dz);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    ..
                } => {
                    let sx = x.shape();
                    let (b, h) = (sx[0], sx[1]);
                    let bf = b as f64;
                    let mut s1 = vec![0.0; h];
                    let mut s2 = vec![0.0; h];
                    for row in 0..b {
                        for col in 0..h {
                            let i = row * h + col;
                            s1[col] += g[i];
                            s2[col] += g[i] * xhat[i];
                        }
                    }
                    if beta.requires_grad() {
                        beta.accumulate_grad(&s1);
                    }
                    if gamma.requires_grad() {
                        gamma.accumulate_grad(&s2);
                    }
                    if x.requires_grad() {
                        let dx = gamma.with_data(|gd| {
                            let mut dx = vec![0.0; b * h];
                            for row in 0..b {
                                for col in 0..h {
                                    let i = row * h + col;
                                    dx[i] = gd[col]
                                        * inv_std[col]
                                        * (g[i] - s1[col] / bf - xhat[i] * s2[col] / bf);
                                }
                            }
                            dx
                        });
                        x.accumulate_grad(&dx);
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    ..
                } => {
                    let sx = x.shape();
                    let (b, h) = (sx[0], sx[1]);
                    if beta.requires_grad() || gamma.requires_grad() {
                        let mut s1 = vec![0.0; h];
                        let mut s2 = vec![0.0; h];
                        for row in 0..b {
                            for col in 0..h {
                                let i = row * h + col;
                                s1[col] += g[i];
                                s2[col] += g[i] * xhat[i];
                            }
                        }
                        if beta.requires_grad() {
                            beta.accumulate_grad(&s1);
                        }
                        if gamma.requires_grad() {
                            gamma.accumulate_grad(&s2);
                        }
                    }
                    if x.requires_grad() {
                        let dx = gamma.with_data(|gd| {
                            let mut dx = vec![0.0; b * h];
                            for row in 0..b {
                                for col in 0..h {
                                    let i = row * h + col;
                                    dx[i] = g[i] * gd[col] * inv_std[col];
                                }
                            }
                            dx
                        });
                        x.accumulate_grad(&dx);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient of a broadcast operand: if the operand was a single element the
/// incoming gradient collapses to its sum, otherwise it passes through.
fn reduce_to(g: &[f64], numel: usize) -> Vec<f64> {
    if numel == 1 && g.len() > 1 {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

fn scale_by(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == 1 {
        g.iter().map(|v| v * other[0]).collect()
    } else if g.len() == other.len() {
        g.iter().zip(other).map(|(a, b)| a * b).collect()
    } else {
        // g shorter than other: scalar side of a scalar-tensor product.
        debug_assert_eq!(g.len(), 1);
        other.iter().map(|v| v * g[0]).collect()
    }
}

/// One plain SGD update: `p <- p - lr * grad(p)`, then gradients are zeroed.
/// This is the single place gradient accumulators are cleared.
pub fn sgd_step(params: &[Tensor], lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(TensorError::Contract {
            op: "sgd_step",
            reason: format!("learning rate must be finite and non-negative, got {lr}"),
        });
    }
    for p in params {
        p.apply_sgd(lr)?;
    }
    Ok(())
}

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if !eps.is_finite() || eps <= 0.0 {
        return Err(TensorError::Contract {
            op: "finite_diff_check",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let shape = x.shape();
    let base = x.data();

    let probe = Tensor::param(&shape, base.clone())?;
    let mut graph = Graph::new();
    let loss = f(&mut graph, &probe)?;
    if !loss.is_scalar() {
        return Err(TensorError::NotScalar {
            shape: loss.shape(),
        });
    }
    graph.backward(&loss)?;
    let analytic = probe.grad().ok_or(TensorError::MissingGrad)?;

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(&shape, data)?;
        let mut g = Graph::new();
        let out = f(&mut g, &t)?;
        Ok(out.value())
    };

    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
