//! Self-attention and modulated attention over backbone feature maps.
//!
//! Self-attention is the embedded-Gaussian non-local form: query/key
//! correlation, row softmax, mixture of value projections, output projection.
//! Modulated attention gates the self-attention map with a per-position
//! scalar (softmax over spatial positions, broadcast across channels) and
//! adds it back to the input:
//!
//! `out = f + gate(f) ⊗ sa(f)`

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{softmax, softmax_backward, Matrix};
use crate::params::ParamSet;

/// Dense C×H×W feature map, data in `[c][h][w]` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "spatial axes must be nonempty");
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0, "spatial axes must be nonempty");
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Number of spatial positions.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// View as a channels × positions matrix (same memory layout).
    fn as_matrix(&self) -> Matrix {
        Matrix::from_vec(self.channels, self.spatial(), self.data.clone())
    }

    fn from_matrix(m: &Matrix, height: usize, width: usize) -> Self {
        FeatureMap::from_vec(m.rows(), height, width, m.data().to_vec())
    }
}

/// Self-attention projections plus the spatial modulation head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Query projection, (C/r)×C.
    pub wq: Matrix,
    /// Key projection, (C/r)×C.
    pub wk: Matrix,
    /// Value projection, (C/r)×C.
    pub wv: Matrix,
    /// Output projection back to C channels, C×(C/r).
    pub wo: Matrix,
    /// Modulation head: one scalar logit per position, 1×C.
    pub wm: Matrix,
}

impl AttentionParams {
    /// Random init. `wo` starts at zero so the block begins as identity.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let reduced = (channels / reduction).max(1);
        let std = (1.0 / channels as f64).sqrt();
        Self {
            wq: Matrix::randn(reduced, channels, std, rng),
            wk: Matrix::randn(reduced, channels, std, rng),
            wv: Matrix::randn(reduced, channels, std, rng),
            wo: Matrix::zeros(channels, reduced),
            wm: Matrix::randn(1, channels, std, rng),
        }
    }

    /// Fully random init (used by the gradient checker, where a zero output
    /// projection would silence half the parameters).
    pub fn init_random(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::init(channels, reduction, rng);
        let reduced = p.wq.rows();
        let std = (1.0 / reduced as f64).sqrt();
        p.wo = Matrix::randn(channels, reduced, std, rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wq: Matrix::zeros(self.wq.rows(), self.wq.cols()),
            wk: Matrix::zeros(self.wk.rows(), self.wk.cols()),
            wv: Matrix::zeros(self.wv.rows(), self.wv.cols()),
            wo: Matrix::zeros(self.wo.rows(), self.wo.cols()),
            wm: Matrix::zeros(self.wm.rows(), self.wm.cols()),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.cols()
    }

    fn check(&self, f: &FeatureMap) -> Result<()> {
        if f.channels != self.channels() {
            return Err(Error::Shape(format!(
                "attention params expect {} channels, feature map has {}",
                self.channels(),
                f.channels
            )));
        }
        Ok(())
    }
}

impl ParamSet for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("wm", &self.wm),
        ] {
            f(name, &[m.rows(), m.cols()], m.data());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (name, m) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("wm", &mut self.wm),
        ] {
            let shape = [m.rows(), m.cols()];
            f(name, &shape, m.data_mut());
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-softmaxed correlation, rows indexed by query position.
    attn: Matrix,
    y: Matrix,
    /// Self-attention output before gating, C×N.
    pub sa: Matrix,
    /// Spatial gate, length N, sums to 1.
    pub gate: Vec<f64>,
}

fn self_attention_core(f: &Matrix, p: &AttentionParams) -> (Matrix, Matrix, Matrix, Matrix, Matrix, Matrix) {
    let q = p.wq.matmul(f);
    let k = p.wk.matmul(f);
    let v = p.wv.matmul(f);
    let scores = q.matmul_tn(&k); // N×N, scores[i][j] = q_i · k_j
    let n = scores.rows();
    let mut attn = Matrix::zeros(n, n);
    for i in 0..n {
        let row = softmax(scores.row(i));
        attn.row_mut(i).copy_from_slice(&row);
    }
    let y = v.matmul_nt(&attn); // y_i = Σ_j attn[i][j] v_j
    let sa = p.wo.matmul(&y);
    (q, k, v, attn, y, sa)
}

/// Non-local self-attention: output has the shape of `f`; each position is a
/// softmax-weighted mixture of value projections, projected back to C
/// channels.
pub fn self_attention(f: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    p.check(f)?;
    let fm = f.as_matrix();
    let (_, _, _, _, _, sa) = self_attention_core(&fm, p);
    Ok(FeatureMap::from_matrix(&sa, f.height, f.width))
}

/// The MA spatial gate: softmax over positions of a 1×1 projection of `f`.
pub fn spatial_gate(f: &FeatureMap, p: &AttentionParams) -> Result<Vec<f64>> {
    p.check(f)?;
    let logits = p.wm.matmul(&f.as_matrix());
    Ok(softmax(logits.row(0)))
}

/// `f + gate ⊗ sa`, the combination step of modulated attention. The gate is
/// broadcast across channels.
pub fn modulated_combine(f: &FeatureMap, gate: &[f64], sa: &FeatureMap) -> FeatureMap {
    assert_eq!(gate.len(), f.spatial(), "gate length mismatch");
    assert_eq!(sa.data.len(), f.data.len(), "sa shape mismatch");
    let n = f.spatial();
    let mut out = f.clone();
    for c in 0..f.channels {
        for j in 0..n {
            out.data[c * n + j] += gate[j] * sa.data[c * n + j];
        }
    }
    out
}

/// Modulated attention: `f + MA(f) ⊗ SA(f)`.
pub fn modulated_attention(f: &FeatureMap, p: &AttentionParams) -> Result<FeatureMap> {
    Ok(modulated_forward(f, p)?.0)
}

/// Forward pass that also returns the cache needed by
/// [`modulated_backward`].
pub fn modulated_forward(f: &FeatureMap, p: &AttentionParams) -> Result<(FeatureMap, AttentionCache)> {
    p.check(f)?;
    let fm = f.as_matrix();
    let (q, k, v, attn, y, sa) = self_attention_core(&fm, p);
    let logits = p.wm.matmul(&fm);
    let gate = softmax(logits.row(0));
    let sa_map = FeatureMap::from_matrix(&sa, f.height, f.width);
    let out = modulated_combine(f, &gate, &sa_map);
    Ok((
        out,
        AttentionCache {
            q,
            k,
            v,
            attn,
            y,
            sa,
            gate,
        },
    ))
}

/// Backward pass of [`modulated_forward`]. Returns the gradient w.r.t. the
/// input map and the parameter gradients.
pub fn modulated_backward(
    f: &FeatureMap,
    p: &AttentionParams,
    cache: &AttentionCache,
    d_out: &FeatureMap,
) -> (FeatureMap, AttentionParams) {
    let n = f.spatial();
    let c = f.channels;
    let fm = f.as_matrix();
    let mut grads = p.zeros_like();

    // Skip connection.
    let mut d_f = d_out.as_matrix();

    // out[c][j] = f[c][j] + gate[j] · sa[c][j]
    let mut d_sa = Matrix::zeros(c, n);
    let mut d_gate = vec![0.0; n];
    for ch in 0..c {
        for j in 0..n {
            let g = d_out.data[ch * n + j];
            d_sa.set(ch, j, g * cache.gate[j]);
            d_gate[j] += g * cache.sa.get(ch, j);
        }
    }

    // Gate head: gate = softmax(wm · f).
    let d_logits = softmax_backward(&cache.gate, &d_gate);
    let d_logits_m = Matrix::from_vec(1, n, d_logits);
    grads.wm.scaled_add(&d_logits_m.matmul_nt(&fm), 1.0);
    d_f.scaled_add(&p.wm.matmul_tn(&d_logits_m), 1.0);

    // Output projection: sa = wo · y.
    grads.wo.scaled_add(&d_sa.matmul_nt(&cache.y), 1.0);
    let d_y = p.wo.matmul_tn(&d_sa); // reduced×N

    // Mixture: y_i = Σ_j attn[i][j] v_j.
    let d_v = d_y.matmul(&cache.attn); // dv_j = Σ_i dy_i attn[i][j]
    let d_attn = d_y.matmul_tn(&cache.v); // d_attn[i][j] = dy_i · v_j

    // Row softmax over correlation scores.
    let rows = cache.attn.rows();
    let mut d_scores = Matrix::zeros(rows, rows);
    for i in 0..rows {
        let ds = softmax_backward(cache.attn.row(i), d_attn.row(i));
        d_scores.row_mut(i).copy_from_slice(&ds);
    }

    // scores[i][j] = q_i · k_j.
    let d_q = cache.k.matmul_nt(&d_scores); // dq_i = Σ_j ds[i][j] k_j
    let d_k = cache.q.matmul(&d_scores); // dk_j = Σ_i ds[i][j] q_i

    // Projections from the input map.
    grads.wq.scaled_add(&d_q.matmul_nt(&fm), 1.0);
    grads.wk.scaled_add(&d_k.matmul_nt(&fm), 1.0);
    grads.wv.scaled_add(&d_v.matmul_nt(&fm), 1.0);
    d_f.scaled_add(&p.wq.matmul_tn(&d_q), 1.0);
    d_f.scaled_add(&p.wk.matmul_tn(&d_k), 1.0);
    d_f.scaled_add(&p.wv.matmul_tn(&d_v), 1.0);

    (FeatureMap::from_matrix(&d_f, f.height, f.width), grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn params_1x2x2() -> AttentionParams {
        // C = 1, reduction 2 → reduced dim 1. Hand-set weights.
        AttentionParams {
            wq: Matrix::from_rows(&[&[0.5]]),
            wk: Matrix::from_rows(&[&[-0.3]]),
            wv: Matrix::from_rows(&[&[1.2]]),
            wo: Matrix::from_rows(&[&[0.8]]),
            wm: Matrix::from_rows(&[&[0.4]]),
        }
    }

    /// Brute-force oracle for the 1-channel case: explicit correlation,
    /// softmax and mixture arithmetic, no shared code with the
    /// implementation.
    fn oracle_sa_1ch(f: &[f64], wq: f64, wk: f64, wv: f64, wo: f64) -> Vec<f64> {
        let n = f.len();
        let q: Vec<f64> = f.iter().map(|x| wq * x).collect();
        let k: Vec<f64> = f.iter().map(|x| wk * x).collect();
        let v: Vec<f64> = f.iter().map(|x| wv * x).collect();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n).map(|j| q[i] * k[j]).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut y = 0.0;
            for j in 0..n {
                y += exps[j] / z * v[j];
            }
            out[i] = wo * y;
        }
        out
    }

    #[test]
    fn hand_set_1x2x2_matches_arithmetic_oracle() {
        let f = FeatureMap::from_vec(1, 2, 2, vec![0.3, -0.7, 1.1, 0.2]);
        let p = params_1x2x2();
        let got = self_attention(&f, &p).unwrap();
        let want = oracle_sa_1ch(&f.data, 0.5, -0.3, 1.2, 0.8);
        for (g, w) in got.data.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "got {g}, oracle {w}");
        }
    }

    #[test]
    fn modulated_hand_set_1x2x2_matches_oracle() {
        let f = FeatureMap::from_vec(1, 2, 2, vec![0.3, -0.7, 1.1, 0.2]);
        let p = params_1x2x2();
        let sa = oracle_sa_1ch(&f.data, 0.5, -0.3, 1.2, 0.8);
        // Gate oracle: softmax over positions of 0.4·f.
        let logits: Vec<f64> = f.data.iter().map(|x| 0.4 * x).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let want: Vec<f64> = (0..4).map(|j| f.data[j] + exps[j] / z * sa[j]).collect();
        let got = modulated_attention(&f, &p).unwrap();
        for (g, w) in got.data.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "got {g}, oracle {w}");
        }
    }

    #[test]
    fn uniform_spatial_positions_give_uniform_output() {
        // All positions identical → correlation weights uniform → every
        // output position identical.
        let mut rng = stream(3, "attn-uniform");
        let p = AttentionParams::init_random(6, 2, &mut rng);
        let mut f = FeatureMap::zeros(6, 3, 3);
        for c in 0..6 {
            for j in 0..9 {
                f.data[c * 9 + j] = (c as f64) * 0.37 - 1.0;
            }
        }
        let out = self_attention(&f, &p).unwrap();
        for c in 0..6 {
            let first = out.data[c * 9];
            for j in 1..9 {
                assert!((out.data[c * 9 + j] - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut rng = stream(4, "attn-shape");
        let p = AttentionParams::init_random(8, 2, &mut rng);
        let data: Vec<f64> = (0..8 * 16).map(|i| (i as f64 * 0.013).sin()).collect();
        let f = FeatureMap::from_vec(8, 4, 4, data);
        let out = self_attention(&f, &p).unwrap();
        assert_eq!((out.channels, out.height, out.width), (8, 4, 4));
        let out = modulated_attention(&f, &p).unwrap();
        assert_eq!((out.channels, out.height, out.width), (8, 4, 4));
    }

    #[test]
    fn zero_gate_reduces_to_identity() {
        let mut rng = stream(5, "attn-zero-gate");
        let p = AttentionParams::init_random(4, 2, &mut rng);
        let data: Vec<f64> = (0..4 * 9).map(|i| (i as f64 * 0.41).cos()).collect();
        let f = FeatureMap::from_vec(4, 3, 3, data);
        let sa = self_attention(&f, &p).unwrap();
        let out = modulated_combine(&f, &[0.0; 9], &sa);
        assert_eq!(out, f);
    }

    #[test]
    fn gate_sums_to_one() {
        let mut rng = stream(6, "attn-gate");
        let p = AttentionParams::init_random(5, 2, &mut rng);
        let data: Vec<f64> = (0..5 * 12).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let f = FeatureMap::from_vec(5, 3, 4, data);
        let gate = spatial_gate(&f, &p).unwrap();
        assert!((gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gate.iter().all(|&g| g > 0.0));
    }

    #[test]
    fn output_minus_input_equals_gated_self_attention() {
        let mut rng = stream(7, "attn-residual");
        let p = AttentionParams::init_random(4, 2, &mut rng);
        let data: Vec<f64> = (0..4 * 4).map(|i| (i as f64 * 1.3).sin()).collect();
        let f = FeatureMap::from_vec(4, 2, 2, data);
        let out = modulated_attention(&f, &p).unwrap();
        let sa = self_attention(&f, &p).unwrap();
        let gate = spatial_gate(&f, &p).unwrap();
        for c in 0..4 {
            for j in 0..4 {
                let residual = out.data[c * 4 + j] - f.data[c * 4 + j];
                let expect = gate[j] * sa.data[c * 4 + j];
                assert!((residual - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = stream(8, "attn-mismatch");
        let p = AttentionParams::init_random(4, 2, &mut rng);
        let f = FeatureMap::zeros(3, 2, 2);
        assert!(self_attention(&f, &p).is_err());
        assert!(modulated_attention(&f, &p).is_err());
    }
}
