//! Desk-scale objectives with analytic gradients.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::data::{Samples, Targets};
use crate::error::{Error, Result};
use crate::params::{LayerLayout, ParamVector};

/// A per-sample loss averaged over a set of rows.
pub trait Objective: Send + Sync + fmt::Debug {
    fn layout(&self) -> &Arc<LayerLayout>;

    /// Mean loss over `rows` of `data`. When `grad` is given it is
    /// overwritten with the mean gradient.
    fn loss_grad(&self, w: &[f64], data: &Samples, rows: &[usize], grad: Option<&mut [f64]>) -> Result<f64>;

    fn is_correct(&self, w: &[f64], data: &Samples, row: usize) -> Result<bool>;

    /// An upper estimate of the gradient Lipschitz constant on `data`, when
    /// one is cheap to compute.
    fn smoothness(&self, _data: &Samples) -> Option<f64> {
        None
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    fn init_model(&self, rng: &mut dyn RngCore) -> ParamVector;
}

fn check_dim(data: &Samples, dim: usize) -> Result<()> {
    if data.dim() != dim {
        return Err(Error::LayoutMismatch(format!("samples have dimension {}, model expects {dim}", data.dim())));
    }
    Ok(())
}

fn class_labels(data: &Samples, classes: usize) -> Result<&[u32]> {
    match data.targets() {
        Targets::Classes { num_classes, labels } if *num_classes == classes => Ok(labels),
        Targets::Classes { num_classes, .. } => {
            Err(Error::LayoutMismatch(format!("samples have {num_classes} classes, model expects {classes}")))
        }
        Targets::Values(_) => Err(Error::Config("classification objective given regression targets".into())),
    }
}

fn uniform_fill(values: &mut [f64], fan_in: usize, rng: &mut dyn RngCore) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in values {
        *v = rng.random_range(-bound..bound);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorize.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Largest eigenvalue of `(1/n)·ZᵀZ` by power iteration, where `Z` is the
/// feature matrix, optionally with a constant column appended.
fn gram_top_eigenvalue(data: &Samples, with_bias: bool) -> f64 {
    let d = data.dim() + usize::from(with_bias);
    let n = data.len().max(1) as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut eig = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for i in 0..data.len() {
            let x = data.row(i);
            let mut s = dot(x, &v[..x.len()]);
            if with_bias {
                s += v[d - 1];
            }
            for (nj, xj) in next.iter_mut().zip(x) {
                *nj += s * xj;
            }
            if with_bias {
                next[d - 1] += s;
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt() / n;
        if norm == 0.0 {
            return 0.0;
        }
        for (vj, nj) in v.iter_mut().zip(&next) {
            *vj = nj / (norm * n);
        }
        if (norm - eig).abs() <= 1e-12 * norm {
            return norm;
        }
        eig = norm;
    }
    eig
}

/// `½‖Aw − b‖²/n` over the selected rows.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    layout: Arc<LayerLayout>,
    dim: usize,
}

impl LeastSquares {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self { layout: Arc::new(LayerLayout::single("weight", dim, true)?), dim })
    }
}

impl Objective for LeastSquares {
    fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    fn loss_grad(&self, w: &[f64], data: &Samples, rows: &[usize], mut grad: Option<&mut [f64]>) -> Result<f64> {
        check_dim(data, self.dim)?;
        let Targets::Values(b) = data.targets() else {
            return Err(Error::Config("least squares needs real-valued targets".into()));
        };
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let n = rows.len().max(1) as f64;
        let mut loss = 0.0;
        for &i in rows {
            let x = data.row(i);
            let r = dot(x, w) - b[i];
            loss += 0.5 * r * r;
            if let Some(g) = grad.as_deref_mut() {
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += r * xj / n;
                }
            }
        }
        Ok(loss / n)
    }

    /// A prediction counts as correct within ±0.5 of the target.
    fn is_correct(&self, w: &[f64], data: &Samples, row: usize) -> Result<bool> {
        check_dim(data, self.dim)?;
        let target = data
            .value(row)
            .ok_or_else(|| Error::Config("least squares needs real-valued targets".into()))?;
        Ok((dot(data.row(row), w) - target).abs() <= 0.5)
    }

    fn smoothness(&self, data: &Samples) -> Option<f64> {
        Some(gram_top_eigenvalue(data, false))
    }

    fn init_model(&self, rng: &mut dyn RngCore) -> ParamVector {
        let mut w = ParamVector::zeros(Arc::clone(&self.layout));
        uniform_fill(w.values_mut(), self.dim, rng);
        w
    }
}

/// Numerically stable softmax cross-entropy on a logit vector. Writes the
/// probabilities into `logits` and returns `−log p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - top).exp();
        total += *z;
    }
    let log_total = total.ln();
    let loss = log_total - (logits[label].ln());
    for z in logits.iter_mut() {
        *z /= total;
    }
    loss
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = j;
        }
    }
    best
}

/// Multinomial logistic regression: `weight` is `[classes, dim]`, `bias` is
/// `[classes]`.
#[derive(Debug, Clone)]
pub struct Softmax {
    layout: Arc<LayerLayout>,
    dim: usize,
    classes: usize,
}

impl Softmax {
    pub fn new(dim: usize, classes: usize) -> Result<Self> {
        let layout = LayerLayout::from_shapes(&[("weight", &[classes, dim]), ("bias", &[classes])])?;
        Ok(Self { layout: Arc::new(layout), dim, classes })
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let (weight, bias) = w.split_at(self.classes * self.dim);
        for (c, z) in out.iter_mut().enumerate() {
            *z = dot(&weight[c * self.dim..(c + 1) * self.dim], x) + bias[c];
        }
    }
}

impl Objective for Softmax {
    fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    fn loss_grad(&self, w: &[f64], data: &Samples, rows: &[usize], mut grad: Option<&mut [f64]>) -> Result<f64> {
        check_dim(data, self.dim)?;
        let labels = class_labels(data, self.classes)?;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let n = rows.len().max(1) as f64;
        let mut z = vec![0.0; self.classes];
        let mut loss = 0.0;
        for &i in rows {
            let x = data.row(i);
            let y = labels[i] as usize;
            self.logits(w, x, &mut z);
            loss += softmax_xent(&mut z, y);
            if let Some(g) = grad.as_deref_mut() {
                z[y] -= 1.0;
                let (gw, gb) = g.split_at_mut(self.classes * self.dim);
                for (c, dz) in z.iter().enumerate() {
                    let row = &mut gw[c * self.dim..(c + 1) * self.dim];
                    for (gj, xj) in row.iter_mut().zip(x) {
                        *gj += dz * xj / n;
                    }
                    gb[c] += dz / n;
                }
            }
        }
        Ok(loss / n)
    }

    fn is_correct(&self, w: &[f64], data: &Samples, row: usize) -> Result<bool> {
        check_dim(data, self.dim)?;
        let labels = class_labels(data, self.classes)?;
        let mut z = vec![0.0; self.classes];
        self.logits(w, data.row(row), &mut z);
        Ok(argmax(&z) == labels[row] as usize)
    }

    /// The softmax Hessian is bounded by ½·I in the logits.
    fn smoothness(&self, data: &Samples) -> Option<f64> {
        Some(0.5 * gram_top_eigenvalue(data, true))
    }

    fn init_model(&self, rng: &mut dyn RngCore) -> ParamVector {
        let mut w = ParamVector::zeros(Arc::clone(&self.layout));
        uniform_fill(w.layer_mut(0), self.dim, rng);
        w
    }
}

/// One tanh hidden layer followed by a softmax output:
/// `hidden.weight [hidden, dim]`, `hidden.bias [hidden]`,
/// `out.weight [classes, hidden]`, `out.bias [classes]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    layout: Arc<LayerLayout>,
    dim: usize,
    hidden: usize,
    classes: usize,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        let layout = LayerLayout::from_shapes(&[
            ("hidden.weight", &[hidden, dim]),
            ("hidden.bias", &[hidden]),
            ("out.weight", &[classes, hidden]),
            ("out.bias", &[classes]),
        ])?;
        Ok(Self { layout: Arc::new(layout), dim, hidden, classes })
    }

    fn split<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = w.split_at(self.hidden * self.dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    fn forward(&self, w: &[f64], x: &[f64], h: &mut [f64], z: &mut [f64]) {
        let (w1, b1, w2, b2) = self.split(w);
        for (k, hk) in h.iter_mut().enumerate() {
            *hk = (dot(&w1[k * self.dim..(k + 1) * self.dim], x) + b1[k]).tanh();
        }
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = dot(&w2[c * self.hidden..(c + 1) * self.hidden], h) + b2[c];
        }
    }
}

impl Objective for Mlp {
    fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    fn loss_grad(&self, w: &[f64], data: &Samples, rows: &[usize], mut grad: Option<&mut [f64]>) -> Result<f64> {
        check_dim(data, self.dim)?;
        let labels = class_labels(data, self.classes)?;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let n = rows.len().max(1) as f64;
        let (_, _, w2, _) = self.split(w);
        let mut h = vec![0.0; self.hidden];
        let mut z = vec![0.0; self.classes];
        let mut dh = vec![0.0; self.hidden];
        let mut loss = 0.0;
        for &i in rows {
            let x = data.row(i);
            let y = labels[i] as usize;
            self.forward(w, x, &mut h, &mut z);
            loss += softmax_xent(&mut z, y);
            let Some(g) = grad.as_deref_mut() else { continue };
            z[y] -= 1.0;
            let (gw1, rest) = g.split_at_mut(self.hidden * self.dim);
            let (gb1, rest) = rest.split_at_mut(self.hidden);
            let (gw2, gb2) = rest.split_at_mut(self.classes * self.hidden);
            dh.fill(0.0);
            for (c, dz) in z.iter().enumerate() {
                let dz = dz / n;
                let w2_row = &w2[c * self.hidden..(c + 1) * self.hidden];
                let g_row = &mut gw2[c * self.hidden..(c + 1) * self.hidden];
                for (g, hk) in g_row.iter_mut().zip(&h) {
                    *g += dz * hk;
                }
                for (d, wk) in dh.iter_mut().zip(w2_row) {
                    *d += dz * wk;
                }
                gb2[c] += dz;
            }
            for (k, (g_row, gb)) in gw1.chunks_exact_mut(self.dim).zip(gb1.iter_mut()).enumerate() {
                let da = dh[k] * (1.0 - h[k] * h[k]);
                for (gj, xj) in g_row.iter_mut().zip(x) {
                    *gj += da * xj;
                }
                *gb += da;
            }
        }
        Ok(loss / n)
    }

    fn is_correct(&self, w: &[f64], data: &Samples, row: usize) -> Result<bool> {
        check_dim(data, self.dim)?;
        let labels = class_labels(data, self.classes)?;
        let mut h = vec![0.0; self.hidden];
        let mut z = vec![0.0; self.classes];
        self.forward(w, data.row(row), &mut h, &mut z);
        Ok(argmax(&z) == labels[row] as usize)
    }

    fn init_model(&self, rng: &mut dyn RngCore) -> ParamVector {
        let mut w = ParamVector::zeros(Arc::clone(&self.layout));
        uniform_fill(w.layer_mut(0), self.dim, rng);
        uniform_fill(w.layer_mut(2), self.hidden, rng);
        w
    }
}
