//! Supervised contrastive loss and binary cross-entropy with logits.
//!
//! Both losses accumulate in `f64` whatever the element type of their input
//! and return the exact gradient w.r.t. that input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult<T: Real = f32> {
    pub loss: f64,
    pub grad: Tensor<T>,
    /// Set when the loss was degenerate (no anchor had a positive).
    pub warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupConConfig {
    pub temperature: f64,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self { temperature: 0.07 }
    }
}

fn check_matrix<T: Real>(z: &Tensor<T>) -> Result<(usize, usize)> {
    if z.shape().len() != 2 {
        return Err(Error::Shape(format!("expected an N x d matrix, got {:?}", z.shape())));
    }
    Ok((z.shape()[0], z.shape()[1]))
}

pub fn l2_normalize_rows<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = check_matrix(z)?;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = z.row(i);
        let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow(i));
        }
        out.extend(row.iter().map(|v| T::of(v.f64() / norm)));
    }
    Tensor::new(vec![n, d], out)
}

/// Gradient through [`l2_normalize_rows`]: for `u = z / |z|`,
/// `dz = (g - u (u . g)) / |z|`.
pub fn l2_normalize_rows_backward<T: Real>(z: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = check_matrix(z)?;
    grad.check_shape(z.shape(), "normalize backward")?;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = z.row(i);
        let g = grad.row(i);
        let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow(i));
        }
        let ug: f64 = row.iter().zip(g).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / norm;
        out.extend(
            row.iter()
                .zip(g)
                .map(|(a, b)| T::of((b.f64() - a.f64() / norm * ug) / norm)),
        );
    }
    Tensor::new(vec![n, d], out)
}

/// Multi-positive supervised contrastive loss on unit-norm rows.
///
/// For anchor `i` with positives `P(i)` (same label, excluding `i`) and
/// candidates `A(i)` (everyone but `i`):
///
/// ```text
/// L_i = -1/|P(i)| * sum_{p in P(i)} log( exp(s_ip) / sum_{a in A(i)} exp(s_ia) ),  s = z z^T / tau
/// ```
///
/// The batch loss averages `L_i` over anchors that have at least one positive.
pub fn supcon_loss<T: Real>(z: &Tensor<T>, labels: &[u8], cfg: &SupConConfig) -> Result<LossResult<T>> {
    let (n, d) = check_matrix(z)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if n < 2 {
        return Err(Error::InvalidInput("supcon needs at least two embeddings".into()));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let tau = cfg.temperature;
    let zd: Vec<f64> = z.data().iter().map(|v| v.f64()).collect();
    let row = |i: usize| &zd[i * d..(i + 1) * d];

    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let s = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>() / tau;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Ok(LossResult {
            loss: 0.0,
            grad: Tensor::zeros(z.shape()),
            warning: true,
        });
    }
    let inv_m = 1.0 / anchors.len() as f64;

    // coef[i][a] = dL/ds_ia
    let mut coef = vec![0.0f64; n * n];
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; n];
    for &i in &anchors {
        let s = &sim[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| s[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for a in 0..n {
            probs[a] = if a == i { 0.0 } else { (s[a] - max).exp() };
            denom += probs[a];
        }
        let log_denom = denom.ln() + max;
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let inv_p = 1.0 / positives.len() as f64;
        let mean_pos = positives.iter().map(|&p| s[p]).sum::<f64>() * inv_p;
        loss += log_denom - mean_pos;
        for a in 0..n {
            if a != i {
                coef[i * n + a] += inv_m * probs[a] / denom;
            }
        }
        for &p in &positives {
            coef[i * n + p] -= inv_m * inv_p;
        }
    }
    loss *= inv_m;

    // s_ia = z_i . z_a / tau contributes to both z_i and z_a.
    let mut grad = vec![0.0f64; n * d];
    for i in 0..n {
        for a in 0..n {
            let c = coef[i * n + a] / tau;
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                grad[i * d + k] += c * zd[a * d + k];
                grad[a * d + k] += c * zd[i * d + k];
            }
        }
    }
    Ok(LossResult {
        loss,
        grad: Tensor::new(z.shape().to_vec(), grad.into_iter().map(T::of).collect())?,
        warning: false,
    })
}

/// Mean binary cross-entropy on logits in the overflow-free form
/// `max(x, 0) - x y + log(1 + exp(-|x|))`.
pub fn bce_logits_loss<T: Real>(logits: &Tensor<T>, targets: &[u8]) -> Result<LossResult<T>> {
    let n = logits.len();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logits", targets.len())));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t > 1) {
        return Err(Error::InvalidInput(format!("target {t} is not binary")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&x, &y) in logits.data().iter().zip(targets) {
        let x = x.f64();
        let y = y as f64;
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad.push(T::of((sigmoid(x) - y) * inv_n));
    }
    Ok(LossResult {
        loss: loss * inv_n,
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
        warning: false,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
