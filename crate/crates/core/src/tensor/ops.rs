use super::{Tensor2, Tensor4};
use crate::error::{MsgcError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn global_avg_pool(x: &Tensor4) -> Result<Tensor2> {
    let (n, c, h, w) = x.shape();
    if h == 0 || w == 0 {
        return Err(MsgcError::shape("global average pool over an empty plane"));
    }
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor2::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            out.set(i, j, x.plane(i, j).iter().sum::<f64>() * inv);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(grad: &Tensor2, h: usize, w: usize) -> Tensor4 {
    let inv = 1.0 / (h * w) as f64;
    Tensor4::from_fn(grad.rows(), grad.cols(), h, w, |n, c, _, _| grad.get(n, c) * inv)
}

/// `x · w + bias`, with `w` shaped `(in, out)`.
pub fn linear(x: &Tensor2, w: &Tensor2, bias: Option<&[f64]>) -> Result<Tensor2> {
    if x.cols() != w.rows() {
        return Err(MsgcError::shape(format!(
            "linear: input {:?} against weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(MsgcError::shape(format!(
                "linear: bias of {} for {} outputs",
                b.len(),
                w.cols()
            )));
        }
    }
    let mut out = Tensor2::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let orow = out.row_mut(r);
        if let Some(b) = bias {
            orow.copy_from_slice(b);
        }
        for (k, &xv) in x.row(r).iter().enumerate() {
            for (o, wv) in orow.iter_mut().zip(w.row(k)) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub x: Tensor2,
    pub w: Tensor2,
    pub bias: Vec<f64>,
}

pub fn linear_backward(grad_out: &Tensor2, x: &Tensor2, w: &Tensor2) -> Result<LinearGrads> {
    if grad_out.shape() != (x.rows(), w.cols()) || x.cols() != w.rows() {
        return Err(MsgcError::shape(format!(
            "linear backward: grad {:?}, input {:?}, weight {:?}",
            grad_out.shape(),
            x.shape(),
            w.shape()
        )));
    }
    let mut dx = Tensor2::zeros(x.rows(), x.cols());
    let mut dw = Tensor2::zeros(w.rows(), w.cols());
    let mut db = vec![0.0; w.cols()];
    for r in 0..x.rows() {
        let g = grad_out.row(r);
        for (slot, gv) in db.iter_mut().zip(g) {
            *slot += gv;
        }
        for k in 0..x.cols() {
            let xv = x.get(r, k);
            let wrow = w.row(k);
            dx.set(r, k, wrow.iter().zip(g).map(|(a, b)| a * b).sum());
            for (d, gv) in dw.row_mut(k).iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    Ok(LinearGrads { x: dx, w: dw, bias: db })
}

/// Tensors whose leading axis is the batch and second axis the normalised feature.
pub trait BnInput: Clone {
    /// `(batch, features, elements per feature per sample)`.
    fn bn_dims(&self) -> (usize, usize, usize);
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
}

impl BnInput for Tensor2 {
    fn bn_dims(&self) -> (usize, usize, usize) {
        (self.rows(), self.cols(), 1)
    }
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self.data_mut()
    }
}

impl BnInput for Tensor4 {
    fn bn_dims(&self) -> (usize, usize, usize) {
        (self.batch(), self.channels(), self.plane_len())
    }
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn values_mut(&mut self) -> &mut [f64] {
        self.data_mut()
    }
}

/// Batch statistics produced by a train-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BnStats {
    /// Exponential moving update; the running variance uses the unbiased estimate.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let unbias = self.count as f64 / (self.count as f64 - 1.0);
        for f in 0..self.mean.len() {
            running_mean[f] = (1.0 - BN_MOMENTUM) * running_mean[f] + BN_MOMENTUM * self.mean[f];
            running_var[f] =
                (1.0 - BN_MOMENTUM) * running_var[f] + BN_MOMENTUM * self.var[f] * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: T,
    inv_std: Vec<f64>,
    pub stats: BnStats,
}

fn check_affine(features: usize, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != features || beta.len() != features {
        return Err(MsgcError::shape(format!(
            "batch norm over {features} features with gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

pub fn batch_norm_train<T: BnInput>(
    x: &T,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(T, BatchNormCache<T>)> {
    let (n, c, inner) = x.bn_dims();
    check_affine(c, gamma, beta)?;
    let count = n * inner;
    if n < 2 || count < 2 {
        return Err(MsgcError::config(format!(
            "train-mode batch norm needs a batch of at least 2 (got {n})"
        )));
    }
    let data = x.values();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for f in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let base = (i * c + f) * inner;
            s += data[base..base + inner].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for i in 0..n {
            let base = (i * c + f) * inner;
            v += data[base..base + inner].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
        mean[f] = m;
        var[f] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    {
        let xh = xhat.values_mut();
        let yv = y.values_mut();
        for i in 0..n {
            for f in 0..c {
                let base = (i * c + f) * inner;
                for j in base..base + inner {
                    let h = (data[j] - mean[f]) * inv_std[f];
                    xh[j] = h;
                    yv[j] = gamma[f] * h + beta[f];
                }
            }
        }
    }
    Ok((y, BatchNormCache { xhat, inv_std, stats: BnStats { mean, var, count } }))
}

pub fn batch_norm_eval<T: BnInput>(
    x: &T,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<T> {
    let (n, c, inner) = x.bn_dims();
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let mut y = x.clone();
    let yv = y.values_mut();
    for f in 0..c {
        let scale = gamma[f] / (running_var[f] + BN_EPS).sqrt();
        let shift = beta[f] - running_mean[f] * scale;
        for i in 0..n {
            let base = (i * c + f) * inner;
            for v in &mut yv[base..base + inner] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: BnInput>(
    grad_out: &T,
    cache: &BatchNormCache<T>,
    gamma: &[f64],
) -> Result<(T, Vec<f64>, Vec<f64>)> {
    let (n, c, inner) = grad_out.bn_dims();
    if (n, c, inner) != cache.xhat.bn_dims() || gamma.len() != c {
        return Err(MsgcError::shape("batch norm backward against a mismatched cache"));
    }
    let dy = grad_out.values();
    let xh = cache.xhat.values();
    let m = (n * inner) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for f in 0..c {
            let base = (i * c + f) * inner;
            for j in base..base + inner {
                dbeta[f] += dy[j];
                dgamma[f] += dy[j] * xh[j];
            }
        }
    }
    let mut dx = grad_out.clone();
    let dxv = dx.values_mut();
    for f in 0..c {
        let k = gamma[f] * cache.inv_std[f] / m;
        for i in 0..n {
            let base = (i * c + f) * inner;
            for j in base..base + inner {
                dxv[j] = k * (m * dy[j] - dbeta[f] - xh[j] * dgamma[f]);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given the forward input; zero at and below zero.
pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter().zip(grad_out).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Gradient through sigmoid given its forward output.
pub fn sigmoid_backward(y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    y.iter().zip(grad_out).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(MsgcError::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(MsgcError::shape("cross entropy over an empty batch"));
    }
    let mut grad = Tensor2::zeros(n, k);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(MsgcError::LabelOutOfRange { index: r, label: label as u32, classes: k as u32 });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(r);
        for (j, slot) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *slot = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}
