//! Direct-feature extractors: a small MLP for flat vectors and a four-block
//! stride-2 conv net for images, with modulated attention optionally applied
//! to the last feature map before global average pooling.

use rand::Rng;

use crate::attention::{modulated_backward, modulated_forward, AttentionCache, AttentionParams, FeatureMap};
use crate::config::{BackboneKind, Config};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::ParamSet;

/// Channel progression of the tiny conv net; the last block always lands on
/// `embed_dim`.
const CONV_CHANNELS: [usize; 3] = [16, 32, 64];
/// Variance guard in the feature-head normalization.
const HEAD_NORM_EPS: f64 = 1e-8;
const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

/// Resolved architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub in_channels: usize,
    pub image_size: usize,
    pub embed_dim: usize,
}

impl BackboneSpec {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            kind: cfg.backbone,
            input_dim: cfg.input_dim,
            hidden_dims: cfg.hidden_dims.clone(),
            in_channels: cfg.conv_in_channels,
            image_size: cfg.conv_image_size,
            embed_dim: cfg.embed_dim,
        }
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            BackboneKind::Mlp => self.input_dim,
            BackboneKind::TinyConv => self.in_channels * self.image_size * self.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearLayer {
    fn init(out_dim: usize, in_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::randn(out_dim, in_dim, std, rng),
            b: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.w.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
        out
    }
}

/// 3×3 stride-2 convolution weights, `[out_c][in_c][kh][kw]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_c: usize,
    pub in_c: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvLayer {
    fn init(out_c: usize, in_c: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * CONV_KERNEL * CONV_KERNEL;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).unwrap();
        use rand_distr::Distribution;
        Self {
            out_c,
            in_c,
            w: (0..out_c * in_c * CONV_KERNEL * CONV_KERNEL)
                .map(|_| normal.sample(rng))
                .collect(),
            b: vec![0.0; out_c],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            out_c: self.out_c,
            in_c: self.in_c,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    #[inline]
    fn widx(&self, oc: usize, ic: usize, kh: usize, kw: usize) -> usize {
        ((oc * self.in_c + ic) * CONV_KERNEL + kh) * CONV_KERNEL + kw
    }

    fn out_size(in_size: usize) -> usize {
        (in_size + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1
    }

    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let out_hw = Self::out_size(input.height);
        let mut out = FeatureMap::zeros(self.out_c, out_hw, out_hw);
        for oc in 0..self.out_c {
            for oh in 0..out_hw {
                for ow in 0..out_hw {
                    let mut acc = self.b[oc];
                    for ic in 0..self.in_c {
                        for kh in 0..CONV_KERNEL {
                            let ih = (oh * CONV_STRIDE + kh) as isize - CONV_PAD as isize;
                            if ih < 0 || ih >= input.height as isize {
                                continue;
                            }
                            for kw in 0..CONV_KERNEL {
                                let iw = (ow * CONV_STRIDE + kw) as isize - CONV_PAD as isize;
                                if iw < 0 || iw >= input.width as isize {
                                    continue;
                                }
                                acc += self.w[self.widx(oc, ic, kh, kw)]
                                    * input.get(ic, ih as usize, iw as usize);
                            }
                        }
                    }
                    out.data[(oc * out_hw + oh) * out_hw + ow] = acc;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` and returns the
    /// gradient w.r.t. the layer input.
    fn backward(&self, input: &FeatureMap, d_out: &FeatureMap, grads: &mut ConvLayer) -> FeatureMap {
        let mut d_in = FeatureMap::zeros(input.channels, input.height, input.width);
        let out_hw = d_out.height;
        for oc in 0..self.out_c {
            for oh in 0..out_hw {
                for ow in 0..out_hw {
                    let g = d_out.data[(oc * out_hw + oh) * out_hw + ow];
                    if g == 0.0 {
                        continue;
                    }
                    grads.b[oc] += g;
                    for ic in 0..self.in_c {
                        for kh in 0..CONV_KERNEL {
                            let ih = (oh * CONV_STRIDE + kh) as isize - CONV_PAD as isize;
                            if ih < 0 || ih >= input.height as isize {
                                continue;
                            }
                            for kw in 0..CONV_KERNEL {
                                let iw = (ow * CONV_STRIDE + kw) as isize - CONV_PAD as isize;
                                if iw < 0 || iw >= input.width as isize {
                                    continue;
                                }
                                let idx = self.widx(oc, ic, kh, kw);
                                grads.w[idx] += g * input.get(ic, ih as usize, iw as usize);
                                d_in.data[(ic * input.height + ih as usize) * input.width
                                    + iw as usize] += g * self.w[idx];
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneParams {
    Mlp(Vec<LinearLayer>),
    Conv(Vec<ConvLayer>),
}

impl BackboneParams {
    pub fn init(spec: &BackboneSpec, rng: &mut impl Rng) -> Self {
        match spec.kind {
            BackboneKind::Mlp => {
                let mut layers = Vec::new();
                let mut in_dim = spec.input_dim;
                for &h in &spec.hidden_dims {
                    layers.push(LinearLayer::init(h, in_dim, (2.0 / in_dim as f64).sqrt(), rng));
                    in_dim = h;
                }
                layers.push(LinearLayer::init(
                    spec.embed_dim,
                    in_dim,
                    (1.0 / in_dim as f64).sqrt(),
                    rng,
                ));
                BackboneParams::Mlp(layers)
            }
            BackboneKind::TinyConv => {
                let mut layers = Vec::new();
                let mut in_c = spec.in_channels;
                for &out_c in CONV_CHANNELS.iter().chain(std::iter::once(&spec.embed_dim)) {
                    layers.push(ConvLayer::init(out_c, in_c, rng));
                    in_c = out_c;
                }
                BackboneParams::Conv(layers)
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            BackboneParams::Mlp(layers) => {
                BackboneParams::Mlp(layers.iter().map(LinearLayer::zeros_like).collect())
            }
            BackboneParams::Conv(layers) => {
                BackboneParams::Conv(layers.iter().map(ConvLayer::zeros_like).collect())
            }
        }
    }
}

impl ParamSet for BackboneParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            BackboneParams::Mlp(layers) => {
                for (i, layer) in layers.iter().enumerate() {
                    f(&format!("fc{i}.w"), &[layer.w.rows(), layer.w.cols()], layer.w.data());
                    f(&format!("fc{i}.b"), &[layer.b.len()], &layer.b);
                }
            }
            BackboneParams::Conv(layers) => {
                for (i, layer) in layers.iter().enumerate() {
                    f(
                        &format!("conv{i}.w"),
                        &[layer.out_c, layer.in_c, CONV_KERNEL, CONV_KERNEL],
                        &layer.w,
                    );
                    f(&format!("conv{i}.b"), &[layer.b.len()], &layer.b);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        match self {
            BackboneParams::Mlp(layers) => {
                for (i, layer) in layers.iter_mut().enumerate() {
                    let shape = [layer.w.rows(), layer.w.cols()];
                    f(&format!("fc{i}.w"), &shape, layer.w.data_mut());
                    let blen = [layer.b.len()];
                    f(&format!("fc{i}.b"), &blen, &mut layer.b);
                }
            }
            BackboneParams::Conv(layers) => {
                for (i, layer) in layers.iter_mut().enumerate() {
                    let wshape = [layer.out_c, layer.in_c, CONV_KERNEL, CONV_KERNEL];
                    f(&format!("conv{i}.w"), &wshape, &mut layer.w);
                    let blen = [layer.b.len()];
                    f(&format!("conv{i}.b"), &blen, &mut layer.b);
                }
            }
        }
    }
}

/// Everything the backward pass needs from one extraction.
#[derive(Debug, Clone)]
pub struct ExtractCache {
    /// MLP: activation entering each layer (first entry is the raw input).
    mlp_inputs: Vec<Vec<f64>>,
    /// MLP: pre-ReLU activations of the hidden layers.
    mlp_preacts: Vec<Vec<f64>>,
    /// Conv: map entering each layer (first entry is the input image).
    conv_inputs: Vec<FeatureMap>,
    /// Conv: pre-ReLU maps per layer.
    conv_preacts: Vec<FeatureMap>,
    /// Feature map produced by the backbone, before attention.
    pub last_map: FeatureMap,
    pub attention: Option<AttentionCache>,
    /// Mean-pooled map, before the head normalization.
    pooled: Vec<f64>,
    /// Normalized pooled vector (pre-tanh).
    head_norm: Vec<f64>,
    /// Standard deviation used by the head normalization.
    head_sigma: f64,
    /// Direct feature: `tanh(layernorm(mean-pool(map)))`. Normalize-then-
    /// bound pins the feature scale; reachability, centroids and margins
    /// all live in distances of this space, so an unbounded or collapsed
    /// feature scale feeds back into its own gradients through the memory
    /// pathways.
    pub feature: Vec<f64>,
}

impl ExtractCache {
    /// Smallest |pre-activation| across every ReLU in the pass. The gradient
    /// checker rejects instances where this is close to the kink.
    pub fn min_relu_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for pre in &self.mlp_preacts {
            for &x in pre {
                m = m.min(x.abs());
            }
        }
        for pre in &self.conv_preacts {
            for &x in &pre.data {
                m = m.min(x.abs());
            }
        }
        m
    }
}

fn global_avg_pool(map: &FeatureMap) -> Vec<f64> {
    let n = map.spatial() as f64;
    (0..map.channels)
        .map(|c| map.data[c * map.spatial()..(c + 1) * map.spatial()].iter().sum::<f64>() / n)
        .collect()
}

/// Extract the direct feature for one input. With `attention_enabled`,
/// modulated attention is applied to the last feature map before pooling.
pub fn extract(
    input: &[f64],
    spec: &BackboneSpec,
    params: &BackboneParams,
    attention: &AttentionParams,
    attention_enabled: bool,
) -> Result<Vec<f64>> {
    Ok(extract_forward(input, spec, params, attention, attention_enabled)?.feature)
}

pub fn extract_forward(
    input: &[f64],
    spec: &BackboneSpec,
    params: &BackboneParams,
    attention: &AttentionParams,
    attention_enabled: bool,
) -> Result<ExtractCache> {
    if input.len() != spec.input_len() {
        return Err(Error::Shape(format!(
            "backbone expects input of length {}, got {}",
            spec.input_len(),
            input.len()
        )));
    }
    let mut cache = ExtractCache {
        mlp_inputs: Vec::new(),
        mlp_preacts: Vec::new(),
        conv_inputs: Vec::new(),
        conv_preacts: Vec::new(),
        last_map: FeatureMap::zeros(1, 1, 1),
        attention: None,
        pooled: Vec::new(),
        head_norm: Vec::new(),
        head_sigma: 0.0,
        feature: Vec::new(),
    };

    let last_map = match params {
        BackboneParams::Mlp(layers) => {
            let mut x = input.to_vec();
            for (i, layer) in layers.iter().enumerate() {
                cache.mlp_inputs.push(x.clone());
                let z = layer.forward(&x);
                if i + 1 < layers.len() {
                    cache.mlp_preacts.push(z.clone());
                    x = z.into_iter().map(|v| v.max(0.0)).collect();
                } else {
                    x = z;
                }
            }
            FeatureMap::from_vec(spec.embed_dim, 1, 1, x)
        }
        BackboneParams::Conv(layers) => {
            let mut map = FeatureMap::from_vec(
                spec.in_channels,
                spec.image_size,
                spec.image_size,
                input.to_vec(),
            );
            for layer in layers {
                cache.conv_inputs.push(map.clone());
                let pre = layer.forward(&map);
                cache.conv_preacts.push(pre.clone());
                map = FeatureMap::from_vec(
                    pre.channels,
                    pre.height,
                    pre.width,
                    pre.data.iter().map(|&v| v.max(0.0)).collect(),
                );
            }
            map
        }
    };

    cache.last_map = last_map;
    let pooled_map = if attention_enabled {
        let (out, attn_cache) = modulated_forward(&cache.last_map, attention)?;
        cache.attention = Some(attn_cache);
        out
    } else {
        cache.last_map.clone()
    };
    cache.pooled = global_avg_pool(&pooled_map);
    let d = cache.pooled.len() as f64;
    let mu = cache.pooled.iter().sum::<f64>() / d;
    let var = cache.pooled.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
    cache.head_sigma = (var + HEAD_NORM_EPS).sqrt();
    cache.head_norm = cache
        .pooled
        .iter()
        .map(|x| (x - mu) / cache.head_sigma)
        .collect();
    cache.feature = cache.head_norm.iter().map(|&x| x.tanh()).collect();
    Ok(cache)
}

/// Backward pass of [`extract_forward`]. Returns gradients for the backbone
/// parameters, the attention parameters and the raw input.
pub fn extract_backward(
    spec: &BackboneSpec,
    params: &BackboneParams,
    attention: &AttentionParams,
    cache: &ExtractCache,
    d_feature: &[f64],
) -> (BackboneParams, AttentionParams, Vec<f64>) {
    // Head backward: tanh, then the normalization, then unpool (the
    // mean's gradient spreads uniformly over positions).
    let dim = cache.feature.len();
    let d_norm: Vec<f64> = d_feature
        .iter()
        .zip(&cache.feature)
        .map(|(d, &t)| d * (1.0 - t * t))
        .collect();
    let mean_d: f64 = d_norm.iter().sum::<f64>() / dim as f64;
    let mean_dy: f64 = d_norm
        .iter()
        .zip(&cache.head_norm)
        .map(|(d, y)| d * y)
        .sum::<f64>()
        / dim as f64;
    let d_pooled: Vec<f64> = d_norm
        .iter()
        .zip(&cache.head_norm)
        .map(|(d, y)| (d - mean_d - y * mean_dy) / cache.head_sigma)
        .collect();

    let n = cache.last_map.spatial();
    let mut d_map = FeatureMap::zeros(cache.last_map.channels, cache.last_map.height, cache.last_map.width);
    for c in 0..d_map.channels {
        let g = d_pooled[c] / n as f64;
        for j in 0..n {
            d_map.data[c * n + j] = g;
        }
    }

    let mut attn_grads = attention.zeros_like();
    let d_last = match &cache.attention {
        Some(attn_cache) => {
            let (d_f, g) = modulated_backward(&cache.last_map, attention, attn_cache, &d_map);
            attn_grads = g;
            d_f
        }
        None => d_map,
    };

    let mut backbone_grads = params.zeros_like();
    let d_input = match (params, &mut backbone_grads) {
        (BackboneParams::Mlp(layers), BackboneParams::Mlp(grads)) => {
            let mut dz = d_last.data.clone();
            for i in (0..layers.len()).rev() {
                if i + 1 < layers.len() {
                    // ReLU mask from the stored pre-activation.
                    for (d, &pre) in dz.iter_mut().zip(&cache.mlp_preacts[i]) {
                        if pre <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let x = &cache.mlp_inputs[i];
                grads[i].w.add_outer(&dz, x);
                for (gb, d) in grads[i].b.iter_mut().zip(&dz) {
                    *gb += d;
                }
                dz = layers[i].w.matvec_t(&dz);
            }
            dz
        }
        (BackboneParams::Conv(layers), BackboneParams::Conv(grads)) => {
            let mut d = d_last;
            for i in (0..layers.len()).rev() {
                // All conv blocks end in ReLU.
                let mut masked = d.clone();
                for (dv, &pre) in masked.data.iter_mut().zip(&cache.conv_preacts[i].data) {
                    if pre <= 0.0 {
                        *dv = 0.0;
                    }
                }
                d = layers[i].backward(&cache.conv_inputs[i], &masked, &mut grads[i]);
            }
            d.data
        }
        _ => unreachable!("params and grads are built from the same spec"),
    };
    let _ = spec;
    (backbone_grads, attn_grads, d_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn mlp_spec() -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::Mlp,
            input_dim: 4,
            hidden_dims: vec![3],
            in_channels: 1,
            image_size: 8,
            embed_dim: 2,
        }
    }

    #[test]
    fn hand_set_mlp_matches_affine_relu_arithmetic() {
        let spec = mlp_spec();
        let layers = vec![
            LinearLayer {
                w: Matrix::from_rows(&[
                    &[0.5, -1.0, 0.25, 0.0],
                    &[1.0, 1.0, -0.5, 0.5],
                    &[-0.25, 0.75, 1.5, -1.0],
                ]),
                b: vec![0.1, -0.2, 0.0],
            },
            LinearLayer {
                w: Matrix::from_rows(&[&[1.0, -1.0, 0.5], &[0.5, 0.25, -0.75]]),
                b: vec![0.0, 0.3],
            },
        ];
        let params = BackboneParams::Mlp(layers);
        let mut rng = stream(0, "bb-attn");
        let attn = AttentionParams::init_random(2, 2, &mut rng);
        let x = [1.0, 2.0, -1.0, 0.5];

        // Oracle by hand: z1 = W1 x + b1, a1 = relu, feature = W2 a1 + b2.
        let z1: [f64; 3] = [
            0.5 - 2.0 - 0.25 + 0.1,
            1.0 + 2.0 + 0.5 + 0.25 - 0.2,
            -0.25 + 1.5 - 1.5 - 0.5,
        ];
        let a1 = [z1[0].max(0.0), z1[1].max(0.0), z1[2].max(0.0)];
        // 1×1 spatial map: pooling is the identity; then the head
        // normalization and tanh.
        let z2 = [
            a1[0] - a1[1] + 0.5 * a1[2],
            0.5 * a1[0] + 0.25 * a1[1] - 0.75 * a1[2] + 0.3,
        ];
        let mu = (z2[0] + z2[1]) / 2.0;
        let var = ((z2[0] - mu) * (z2[0] - mu) + (z2[1] - mu) * (z2[1] - mu)) / 2.0;
        let sigma = (var + 1e-8).sqrt();
        let want = [((z2[0] - mu) / sigma).tanh(), ((z2[1] - mu) / sigma).tanh()];

        let got = extract(&x, &spec, &params, &attn, false).unwrap();
        assert!((got[0] - want[0]).abs() < 1e-12);
        assert!((got[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_disabled_equals_plain_backbone_feature() {
        let spec = mlp_spec();
        let mut rng = stream(1, "bb-init");
        let params = BackboneParams::init(&spec, &mut rng);
        let attn = AttentionParams::init_random(2, 2, &mut rng);
        let x = [0.5, -0.3, 1.2, 0.8];
        let cache = extract_forward(&x, &spec, &params, &attn, false).unwrap();
        let pooled = global_avg_pool(&cache.last_map);
        let mu = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let var = pooled.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / pooled.len() as f64;
        let sigma = (var + 1e-8).sqrt();
        let plain: Vec<f64> = pooled.iter().map(|x| ((x - mu) / sigma).tanh()).collect();
        assert_eq!(cache.feature, plain);
        assert!(cache.feature.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let spec = mlp_spec();
        let mut rng = stream(2, "bb-det");
        let params = BackboneParams::init(&spec, &mut rng);
        let attn = AttentionParams::init_random(2, 2, &mut rng);
        let x = [0.1, 0.2, 0.3, 0.4];
        let a = extract(&x, &spec, &params, &attn, true).unwrap();
        let b = extract(&x, &spec, &params, &attn, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let spec = mlp_spec();
        let mut rng = stream(3, "bb-len");
        let params = BackboneParams::init(&spec, &mut rng);
        let attn = AttentionParams::init_random(2, 2, &mut rng);
        assert!(extract(&[1.0; 5], &spec, &params, &attn, false).is_err());
    }

    #[test]
    fn conv_output_dim_equals_embed_dim() {
        let spec = BackboneSpec {
            kind: BackboneKind::TinyConv,
            input_dim: 0,
            hidden_dims: vec![],
            in_channels: 1,
            image_size: 8,
            embed_dim: 5,
        };
        let mut rng = stream(4, "bb-conv");
        let params = BackboneParams::init(&spec, &mut rng);
        let attn = AttentionParams::init_random(5, 2, &mut rng);
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin()).collect();
        let feat = extract(&x, &spec, &params, &attn, true).unwrap();
        assert_eq!(feat.len(), 5);
        assert!(feat.iter().all(|v| v.is_finite()));
    }
}
