//! Dynamic meta-embedding: hallucinated memory coefficients, memory feature,
//! concept selector, reachability, and their calibrated combination
//!
//! `v_meta = (1/γ) · (v_direct + e ⊗ v_memory)`
//!
//! where `γ` is the distance from the direct feature to the nearest centroid.
//! Small γ means the input sits near known classes and the embedding is
//! amplified; large γ pushes it toward the origin, which is what lets the
//! classifier treat far-from-memory inputs as likely open-set.

use rand::Rng;

use crate::centroid::CentroidMemory;
use crate::error::{Error, Result};
use crate::linalg::{dot, euclidean, softmax, softmax_backward, Matrix};
use crate::params::ParamSet;

/// Weights of the coefficient hallucinator `T_hal : embed_dim → K`.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinatorParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl HallucinatorParams {
    pub fn init(num_classes: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::randn(num_classes, embed_dim, (1.0 / embed_dim as f64).sqrt(), rng),
            b: vec![0.0; num_classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

impl ParamSet for HallucinatorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("w", &[self.w.rows(), self.w.cols()], self.w.data());
        f("b", &[self.b.len()], &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.w.rows(), self.w.cols()];
        f("w", &shape, self.w.data_mut());
        let blen = [self.b.len()];
        f("b", &blen, &mut self.b);
    }
}

/// Weights of the concept selector `T_sel : embed_dim → embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl SelectorParams {
    pub fn init(embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::randn(embed_dim, embed_dim, (1.0 / embed_dim as f64).sqrt(), rng),
            b: vec![0.0; embed_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

impl ParamSet for SelectorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("w", &[self.w.rows(), self.w.cols()], self.w.data());
        f("b", &[self.b.len()], &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.w.rows(), self.w.cols()];
        f("w", &shape, self.w.data_mut());
        let blen = [self.b.len()];
        f("b", &blen, &mut self.b);
    }
}

/// The calibrated embedding plus the reachability recorded for the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaEmbedding {
    pub vector: Vec<f64>,
    pub gamma: f64,
}

/// Component toggles of the meta-embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedOptions {
    pub memory_feature: bool,
    pub concept_selector: bool,
    pub calibration: bool,
    /// Softmax-normalize hallucinated coefficients (default). Raw linear
    /// output available for comparison.
    pub softmax_coefficients: bool,
    /// Let gradients flow through γ (off by default: γ acts as a
    /// stop-gradient scale).
    pub grad_through_gamma: bool,
    pub gamma_eps: f64,
}

impl EmbedOptions {
    pub fn full(gamma_eps: f64) -> Self {
        Self {
            memory_feature: true,
            concept_selector: true,
            calibration: true,
            softmax_coefficients: true,
            grad_through_gamma: false,
            gamma_eps,
        }
    }
}

/// Memory coefficients hallucinated from the direct feature:
/// `o = softmax(W v + b)` (or the raw affine output when normalization is
/// disabled).
pub fn hallucinate(v_direct: &[f64], params: &HallucinatorParams, normalize: bool) -> Vec<f64> {
    let mut logits = params.w.matvec(v_direct);
    for (l, b) in logits.iter_mut().zip(&params.b) {
        *l += b;
    }
    if normalize {
        softmax(&logits)
    } else {
        logits
    }
}

/// `v_memory = oᵀM = Σ_i o_i c_i`.
pub fn compose_memory_feature(o: &[f64], memory: &CentroidMemory) -> Result<Vec<f64>> {
    if o.len() != memory.num_classes() {
        return Err(Error::Shape(format!(
            "coefficient vector has length {}, memory has {} classes",
            o.len(),
            memory.num_classes()
        )));
    }
    Ok(memory.as_matrix().matvec_t(o))
}

/// Reachability of the direct feature to the memory:
/// `γ = max(gamma_eps, min_i ‖v − c_i‖)`.
pub fn reachability(v_direct: &[f64], memory: &CentroidMemory, gamma_eps: f64) -> Result<f64> {
    Ok(reachability_detail(v_direct, memory, gamma_eps)?.0)
}

/// Reachability plus the nearest centroid index and whether the clamp fired.
pub fn reachability_detail(
    v_direct: &[f64],
    memory: &CentroidMemory,
    gamma_eps: f64,
) -> Result<(f64, usize, bool)> {
    if memory.num_classes() == 0 {
        return Err(Error::EmptyMemory);
    }
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for i in 0..memory.num_classes() {
        let d = euclidean(v_direct, memory.centroid(i));
        if d < best {
            best = d;
            best_idx = i;
        }
    }
    if best < gamma_eps {
        Ok((gamma_eps, best_idx, true))
    } else {
        Ok((best, best_idx, false))
    }
}

/// Concept selector `e = tanh(W v + b)`; entries in (−1, 1).
pub fn concept_select(v_direct: &[f64], params: &SelectorParams) -> Vec<f64> {
    let mut pre = params.w.matvec(v_direct);
    for (p, b) in pre.iter_mut().zip(&params.b) {
        *p += b;
    }
    pre.into_iter().map(f64::tanh).collect()
}

/// Intermediates for the backward pass.
#[derive(Debug, Clone)]
pub struct MetaEmbedCache {
    pub coefficients: Vec<f64>,
    pub selector: Vec<f64>,
    pub memory_feature: Vec<f64>,
    /// `v_direct + e ⊗ v_memory` before calibration.
    pub numerator: Vec<f64>,
    pub gamma: f64,
    pub nearest: usize,
    pub clamped: bool,
}

/// Compute the dynamic meta-embedding.
pub fn meta_embed(
    v_direct: &[f64],
    memory: &CentroidMemory,
    hal: &HallucinatorParams,
    sel: &SelectorParams,
    opts: &EmbedOptions,
) -> Result<MetaEmbedding> {
    Ok(meta_embed_forward(v_direct, memory, hal, sel, opts)?.0)
}

pub fn meta_embed_forward(
    v_direct: &[f64],
    memory: &CentroidMemory,
    hal: &HallucinatorParams,
    sel: &SelectorParams,
    opts: &EmbedOptions,
) -> Result<(MetaEmbedding, MetaEmbedCache)> {
    let dim = v_direct.len();
    let (gamma, nearest, clamped) = reachability_detail(v_direct, memory, opts.gamma_eps)?;

    let (coefficients, memory_feature) = if opts.memory_feature {
        let o = hallucinate(v_direct, hal, opts.softmax_coefficients);
        let vm = compose_memory_feature(&o, memory)?;
        (o, vm)
    } else {
        (vec![0.0; memory.num_classes()], vec![0.0; dim])
    };

    let selector = if opts.concept_selector {
        concept_select(v_direct, sel)
    } else {
        vec![1.0; dim]
    };

    let mut numerator = v_direct.to_vec();
    if opts.memory_feature {
        for ((n, e), m) in numerator.iter_mut().zip(&selector).zip(&memory_feature) {
            *n += e * m;
        }
    }

    let scale = if opts.calibration { 1.0 / gamma } else { 1.0 };
    let vector: Vec<f64> = numerator.iter().map(|x| x * scale).collect();
    Ok((
        MetaEmbedding { vector, gamma },
        MetaEmbedCache {
            coefficients,
            selector,
            memory_feature,
            numerator,
            gamma,
            nearest,
            clamped,
        },
    ))
}

/// Parameter and input gradients of the meta-embedding.
#[derive(Debug, Clone)]
pub struct MetaEmbedGrads {
    pub d_v_direct: Vec<f64>,
    pub d_hal: HallucinatorParams,
    pub d_sel: SelectorParams,
}

/// Backward pass of [`meta_embed_forward`] given `dL/dv_meta`.
///
/// Gradients never flow into the memory (centroids follow their own update
/// rule); gradients flow through γ only when `opts.grad_through_gamma` is
/// set and the clamp did not fire.
pub fn meta_embed_backward(
    v_direct: &[f64],
    memory: &CentroidMemory,
    hal: &HallucinatorParams,
    sel: &SelectorParams,
    opts: &EmbedOptions,
    cache: &MetaEmbedCache,
    d_meta: &[f64],
) -> MetaEmbedGrads {
    let dim = v_direct.len();
    let scale = if opts.calibration { 1.0 / cache.gamma } else { 1.0 };

    // v_meta = scale · numerator
    let d_numerator: Vec<f64> = d_meta.iter().map(|d| d * scale).collect();
    let mut d_v = d_numerator.clone();

    let mut d_hal = hal.zeros_like();
    let mut d_sel = sel.zeros_like();

    if opts.memory_feature {
        // numerator = v_direct + e ⊗ v_memory
        let d_e: Vec<f64> = d_numerator
            .iter()
            .zip(&cache.memory_feature)
            .map(|(d, m)| d * m)
            .collect();
        let d_vmem: Vec<f64> = d_numerator
            .iter()
            .zip(&cache.selector)
            .map(|(d, e)| d * e)
            .collect();

        // v_memory = Mᵀ o
        let d_o = memory.as_matrix().matvec(&d_vmem);
        let d_logits = if opts.softmax_coefficients {
            softmax_backward(&cache.coefficients, &d_o)
        } else {
            d_o
        };
        d_hal.w.add_outer(&d_logits, v_direct);
        for (b, d) in d_hal.b.iter_mut().zip(&d_logits) {
            *b += d;
        }
        let back = hal.w.matvec_t(&d_logits);
        for (dv, b) in d_v.iter_mut().zip(&back) {
            *dv += b;
        }

        if opts.concept_selector {
            // e = tanh(pre); de/dpre = 1 − e².
            let d_pre: Vec<f64> = d_e
                .iter()
                .zip(&cache.selector)
                .map(|(d, e)| d * (1.0 - e * e))
                .collect();
            d_sel.w.add_outer(&d_pre, v_direct);
            for (b, d) in d_sel.b.iter_mut().zip(&d_pre) {
                *b += d;
            }
            let back = sel.w.matvec_t(&d_pre);
            for (dv, b) in d_v.iter_mut().zip(&back) {
                *dv += b;
            }
        }
    }

    if opts.calibration && opts.grad_through_gamma && !cache.clamped {
        // dL/dγ = −(numerator · d_meta)/γ²; dγ/dv = (v − c_nearest)/γ.
        let d_gamma = -dot(&cache.numerator, d_meta) / (cache.gamma * cache.gamma);
        let nearest = memory.centroid(cache.nearest);
        for i in 0..dim {
            d_v[i] += d_gamma * (v_direct[i] - nearest[i]) / cache.gamma;
        }
    }

    MetaEmbedGrads {
        d_v_direct: d_v,
        d_hal,
        d_sel,
    }
}
