//! End-to-end model: backbone → (attention) → direct feature →
//! meta-embedding → cosine classifier, plus the plain-softmax baseline, with
//! hand-derived backward passes for every piece.

use rand::Rng;

use crate::attention::AttentionParams;
use crate::backbone::{
    extract_backward, extract_forward, BackboneParams, BackboneSpec, ExtractCache,
};
use crate::centroid::{large_margin_loss_with_grad, CentroidMemory};
use crate::classifier::{
    cosine_logits, cosine_logits_backward, cross_entropy_with_grad, squash, ClassifierWeights,
};
use crate::config::{Config, LossReduction, ModelVariant};
use crate::embed::{
    meta_embed_backward, meta_embed_forward, EmbedOptions, HallucinatorParams, MetaEmbedCache,
    MetaEmbedding, SelectorParams,
};
use crate::error::{Error, Result};
use crate::linalg::{norm, softmax, Matrix};
use crate::params::ParamSet;
use crate::parallel::map_collect;
use crate::rng::stream;
use crate::types::{Label, LabeledExample};

/// Linear softmax head of the plain baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl PlainHead {
    fn init(num_classes: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::randn(num_classes, embed_dim, (1.0 / embed_dim as f64).sqrt(), rng),
            b: vec![0.0; num_classes],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

/// Every trainable tensor in the system. Both variants share the container;
/// groups a variant does not use simply receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub attention: AttentionParams,
    pub hallucinator: HallucinatorParams,
    pub selector: SelectorParams,
    pub classifier: ClassifierWeights,
    pub plain_head: PlainHead,
}

impl ModelParams {
    /// Seed-derived initialization; every group draws from its own stream.
    pub fn init(cfg: &Config) -> Self {
        let spec = BackboneSpec::from_config(cfg);
        Self {
            backbone: BackboneParams::init(&spec, &mut stream(cfg.seed, "init.backbone")),
            attention: AttentionParams::init(
                cfg.embed_dim,
                cfg.attention_reduction,
                &mut stream(cfg.seed, "init.attention"),
            ),
            hallucinator: HallucinatorParams::init(
                cfg.num_classes,
                cfg.embed_dim,
                &mut stream(cfg.seed, "init.hallucinator"),
            ),
            selector: SelectorParams::init(cfg.embed_dim, &mut stream(cfg.seed, "init.selector")),
            classifier: ClassifierWeights::init(
                cfg.num_classes,
                cfg.embed_dim,
                &mut stream(cfg.seed, "init.classifier"),
            ),
            plain_head: PlainHead::init(
                cfg.num_classes,
                cfg.embed_dim,
                &mut stream(cfg.seed, "init.plain_head"),
            ),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            attention: self.attention.zeros_like(),
            hallucinator: self.hallucinator.zeros_like(),
            selector: self.selector.zeros_like(),
            classifier: self.classifier.zeros_like(),
            plain_head: self.plain_head.zeros_like(),
        }
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &ModelParams, scale: f64) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, _, data| {
            for d in data.iter_mut() {
                *d += scale * flat[offset];
                offset += 1;
            }
        });
        debug_assert_eq!(offset, flat.len());
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let mut scoped = |prefix: &str, set: &dyn ParamSet| {
            set.visit(&mut |name, shape, data| f(&format!("{prefix}.{name}"), shape, data));
        };
        scoped("backbone", &self.backbone);
        scoped("attention", &self.attention);
        scoped("hallucinator", &self.hallucinator);
        scoped("selector", &self.selector);
        scoped("classifier", &self.classifier);
        f("plain_head.w", &[self.plain_head.w.rows(), self.plain_head.w.cols()], self.plain_head.w.data());
        f("plain_head.b", &[self.plain_head.b.len()], &self.plain_head.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let mut scoped = |prefix: &str, set: &mut dyn ParamSet| {
            set.visit_mut(&mut |name, shape, data| f(&format!("{prefix}.{name}"), shape, data));
        };
        scoped("backbone", &mut self.backbone);
        scoped("attention", &mut self.attention);
        scoped("hallucinator", &mut self.hallucinator);
        scoped("selector", &mut self.selector);
        scoped("classifier", &mut self.classifier);
        let wshape = [self.plain_head.w.rows(), self.plain_head.w.cols()];
        f("plain_head.w", &wshape, self.plain_head.w.data_mut());
        let blen = [self.plain_head.b.len()];
        f("plain_head.b", &blen, &mut self.plain_head.b);
    }
}

impl EmbedOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            memory_feature: cfg.memory_enabled,
            concept_selector: cfg.selector_enabled,
            calibration: cfg.calibration_enabled,
            softmax_coefficients: cfg.hallucinate_softmax,
            grad_through_gamma: cfg.grad_through_gamma,
            gamma_eps: cfg.gamma_eps,
        }
    }
}

/// Forward state of one sample.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub extract: ExtractCache,
    pub meta: Option<(MetaEmbedding, MetaEmbedCache)>,
    pub logits: Vec<f64>,
    /// ‖squash(v_meta)‖ — the quantity the open-set mechanism drives down
    /// for unfamiliar inputs. Absent for the plain baseline.
    pub squashed_norm: Option<f64>,
}

impl SampleForward {
    pub fn v_direct(&self) -> &[f64] {
        &self.extract.feature
    }

    pub fn gamma(&self) -> Option<f64> {
        self.meta.as_ref().map(|(m, _)| m.gamma)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// Run one input through the configured variant. `memory` is required for
/// the full model and ignored by the plain baseline.
pub fn forward_sample(
    params: &ModelParams,
    memory: Option<&CentroidMemory>,
    cfg: &Config,
    input: &[f64],
) -> Result<SampleForward> {
    let spec = BackboneSpec::from_config(cfg);
    match cfg.model_variant {
        ModelVariant::Full => {
            let extract = extract_forward(
                input,
                &spec,
                &params.backbone,
                &params.attention,
                cfg.attention_enabled,
            )?;
            let memory = memory.ok_or(Error::EmptyMemory)?;
            let opts = EmbedOptions::from_config(cfg);
            let (meta, cache) = meta_embed_forward(
                &extract.feature,
                memory,
                &params.hallucinator,
                &params.selector,
                &opts,
            )?;
            let logits = cosine_logits(&meta.vector, &params.classifier, cfg.logit_scale_s)?;
            let squashed_norm = norm(&squash(&meta.vector));
            Ok(SampleForward {
                extract,
                meta: Some((meta, cache)),
                logits,
                squashed_norm: Some(squashed_norm),
            })
        }
        ModelVariant::Plain => {
            // The plain baseline is the vanilla backbone: no attention, no
            // memory, a biased linear head.
            let extract = extract_forward(input, &spec, &params.backbone, &params.attention, false)?;
            let mut logits = params.plain_head.w.matvec(&extract.feature);
            for (l, b) in logits.iter_mut().zip(&params.plain_head.b) {
                *l += b;
            }
            Ok(SampleForward {
                extract,
                meta: None,
                logits,
                squashed_norm: None,
            })
        }
    }
}

/// Loss pieces of one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub ce: f64,
    pub lm: f64,
    pub correct: bool,
}

impl SampleLoss {
    pub fn combined(&self, lambda: f64) -> f64 {
        self.ce + lambda * self.lm
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn known_label(example: &LabeledExample) -> Result<usize> {
    match example.label {
        Label::Known(y) => Ok(y),
        Label::Open => Err(Error::Format(format!(
            "example {} carries the OPEN label inside a training batch",
            example.id
        ))),
    }
}

/// Forward plus loss for one labeled sample.
pub fn sample_loss(
    params: &ModelParams,
    memory: Option<&CentroidMemory>,
    cfg: &Config,
    example: &LabeledExample,
) -> Result<(SampleForward, SampleLoss)> {
    let y = known_label(example)?;
    let fwd = forward_sample(params, memory, cfg, &example.input)?;
    let (ce, _) = cross_entropy_with_grad(&fwd.logits, y)?;
    let lm = match (&fwd.meta, cfg.model_variant) {
        (Some((meta, _)), ModelVariant::Full) if cfg.lambda_lm > 0.0 => {
            let memory = memory.ok_or(Error::EmptyMemory)?;
            large_margin_loss_with_grad(
                &meta.vector,
                y,
                memory,
                cfg.margin_m,
                cfg.lm_nearest_negative,
            )?
            .0
        }
        _ => 0.0,
    };
    let correct = argmax(&fwd.logits) == y;
    Ok((fwd, SampleLoss { ce, lm, correct }))
}

/// Loss, gradients, and the sample's direct feature (for the centroid
/// update) in one backward pass.
pub fn sample_grads(
    params: &ModelParams,
    memory: Option<&CentroidMemory>,
    cfg: &Config,
    example: &LabeledExample,
) -> Result<(SampleLoss, ModelParams, Vec<f64>, Option<f64>)> {
    let y = known_label(example)?;
    let fwd = forward_sample(params, memory, cfg, &example.input)?;
    let mut grads = params.zeros_like();
    let spec = BackboneSpec::from_config(cfg);

    let (ce, d_logits) = cross_entropy_with_grad(&fwd.logits, y)?;

    let (loss, d_v_direct) = match cfg.model_variant {
        ModelVariant::Full => {
            let memory = memory.ok_or(Error::EmptyMemory)?;
            let (meta, cache) = fwd.meta.as_ref().expect("full variant always embeds");

            let (mut d_meta, d_classifier) =
                cosine_logits_backward(&meta.vector, &params.classifier, cfg.logit_scale_s, &d_logits);
            grads.classifier.w.scaled_add(&d_classifier.w, 1.0);

            let lm = if cfg.lambda_lm > 0.0 {
                let (lm, d_lm) = large_margin_loss_with_grad(
                    &meta.vector,
                    y,
                    memory,
                    cfg.margin_m,
                    cfg.lm_nearest_negative,
                )?;
                for (d, g) in d_meta.iter_mut().zip(&d_lm) {
                    *d += cfg.lambda_lm * g;
                }
                lm
            } else {
                0.0
            };

            let opts = EmbedOptions::from_config(cfg);
            let embed_grads = meta_embed_backward(
                &fwd.extract.feature,
                memory,
                &params.hallucinator,
                &params.selector,
                &opts,
                cache,
                &d_meta,
            );
            grads.hallucinator.w.scaled_add(&embed_grads.d_hal.w, 1.0);
            for (b, d) in grads.hallucinator.b.iter_mut().zip(&embed_grads.d_hal.b) {
                *b += d;
            }
            grads.selector.w.scaled_add(&embed_grads.d_sel.w, 1.0);
            for (b, d) in grads.selector.b.iter_mut().zip(&embed_grads.d_sel.b) {
                *b += d;
            }

            (
                SampleLoss {
                    ce,
                    lm,
                    correct: argmax(&fwd.logits) == y,
                },
                embed_grads.d_v_direct,
            )
        }
        ModelVariant::Plain => {
            grads.plain_head.w.add_outer(&d_logits, &fwd.extract.feature);
            for (b, d) in grads.plain_head.b.iter_mut().zip(&d_logits) {
                *b += d;
            }
            let d_v = params.plain_head.w.matvec_t(&d_logits);
            (
                SampleLoss {
                    ce,
                    lm: 0.0,
                    correct: argmax(&fwd.logits) == y,
                },
                d_v,
            )
        }
    };

    let (backbone_grads, attn_grads, _) = extract_backward(
        &spec,
        &params.backbone,
        &params.attention,
        &fwd.extract,
        &d_v_direct,
    );
    grads.backbone = backbone_grads;
    grads.attention = attn_grads;

    let gamma = fwd.gamma();
    Ok((loss, grads, fwd.extract.feature, gamma))
}

/// Batch loss totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub lm: f64,
}

/// Combined objective over a batch: `Σ CE + λ·Σ LM` (sum reduction per the
/// default; mean divides by the batch size).
pub fn total_loss(
    batch: &[LabeledExample],
    params: &ModelParams,
    memory: Option<&CentroidMemory>,
    cfg: &Config,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let losses = map_collect(batch, |ex| sample_loss(params, memory, cfg, ex));
    let mut ce = 0.0;
    let mut lm = 0.0;
    for result in losses {
        let (_, loss) = result?;
        ce += loss.ce;
        lm += loss.lm;
    }
    if cfg.loss_reduction == LossReduction::Mean {
        ce /= batch.len() as f64;
        lm /= batch.len() as f64;
    }
    Ok(LossBreakdown {
        total: ce + cfg.lambda_lm * lm,
        ce,
        lm,
    })
}
