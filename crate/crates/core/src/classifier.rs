//! Cosine classifier with squashing normalization, and cross-entropy.
//!
//! The squashing map keeps direction and compresses norms below 1:
//! `squash(v) = (‖v‖²/(1+‖v‖²)) · v/‖v‖`. Classifier rows are normalized at
//! use, so logits are scaled cosines and per-row rescaling of the weights
//! changes nothing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm, softmax, Matrix};
use crate::params::ParamSet;

/// Classifier weight rows, one per class; no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub w: Matrix,
}

impl ClassifierWeights {
    pub fn init(num_classes: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::randn(num_classes, embed_dim, (1.0 / embed_dim as f64).sqrt(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }
}

impl ParamSet for ClassifierWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("w", &[self.w.rows(), self.w.cols()], self.w.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.w.rows(), self.w.cols()];
        f("w", &shape, self.w.data_mut());
    }
}

/// Non-linear squashing. `squash(0) = 0` (the limit value); otherwise the
/// output keeps the direction of `v` with norm `‖v‖²/(1+‖v‖²) < 1`.
pub fn squash(v: &[f64]) -> Vec<f64> {
    let r = norm(v);
    if r == 0.0 {
        return vec![0.0; v.len()];
    }
    // (r²/(1+r²))·(v/r) = r/(1+r²) · v
    let s = r / (1.0 + r * r);
    v.iter().map(|x| x * s).collect()
}

/// Backward pass of [`squash`]: given `dL/d squash(v)`, returns `dL/dv`.
///
/// With `s(r) = r/(1+r²)`, the Jacobian is `s·I + (s'/r)·v vᵀ` where
/// `s'(r) = (1−r²)/(1+r²)²`. At the origin the map is quadratically flat, so
/// the gradient is zero.
pub fn squash_backward(v: &[f64], d_out: &[f64]) -> Vec<f64> {
    let r = norm(v);
    if r == 0.0 {
        return vec![0.0; v.len()];
    }
    let s = r / (1.0 + r * r);
    let ds = (1.0 - r * r) / ((1.0 + r * r) * (1.0 + r * r));
    let v_dot = dot(v, d_out);
    let coeff = ds / r * v_dot;
    v.iter()
        .zip(d_out)
        .map(|(x, d)| s * d + coeff * x)
        .collect()
}

/// Scaled cosine logits: `logit_k = s · ⟨squash(v), w_k/‖w_k‖⟩`.
pub fn cosine_logits(v_meta: &[f64], weights: &ClassifierWeights, scale: f64) -> Result<Vec<f64>> {
    if v_meta.len() != weights.w.cols() {
        return Err(Error::Shape(format!(
            "classifier expects dimension {}, embedding has {}",
            weights.w.cols(),
            v_meta.len()
        )));
    }
    let squashed = squash(v_meta);
    let mut logits = Vec::with_capacity(weights.num_classes());
    for k in 0..weights.num_classes() {
        let row = weights.w.row(k);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNormClassifierRow(k));
        }
        logits.push(scale * dot(&squashed, row) / n);
    }
    Ok(logits)
}

/// Backward pass of [`cosine_logits`]: gradients w.r.t. the embedding and
/// the weight rows.
pub fn cosine_logits_backward(
    v_meta: &[f64],
    weights: &ClassifierWeights,
    scale: f64,
    d_logits: &[f64],
) -> (Vec<f64>, ClassifierWeights) {
    let squashed = squash(v_meta);
    let mut d_squashed = vec![0.0; v_meta.len()];
    let mut d_w = weights.zeros_like();
    for k in 0..weights.num_classes() {
        let g = d_logits[k];
        let row = weights.w.row(k);
        let n = norm(row);
        let unit: Vec<f64> = row.iter().map(|x| x / n).collect();
        if g != 0.0 {
            // d logit/d squashed = s · ŵ_k
            for (d, u) in d_squashed.iter_mut().zip(&unit) {
                *d += scale * g * u;
            }
            // d logit/d w_k = s · (squashed − (squashed·ŵ)ŵ)/‖w‖
            let proj = dot(&squashed, &unit);
            let drow = d_w.w.row_mut(k);
            for i in 0..drow.len() {
                drow[i] += scale * g * (squashed[i] - proj * unit[i]) / n;
            }
        }
    }
    let d_v = squash_backward(v_meta, &d_squashed);
    (d_v, d_w)
}

/// `−log softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[y])
}

/// Loss and gradient w.r.t. the logits (`softmax − onehot`).
pub fn cross_entropy_with_grad(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, y)?;
    let mut grad = softmax(logits);
    grad[y] -= 1.0;
    Ok((loss, grad))
}
