//! Validated run configuration.
//!
//! Every hyperparameter in the system lives here; downstream modules never
//! hold their own numeric constants. The on-disk format is flat key-value
//! text (`key = value`, one per line, `#` comments); the same keys are
//! accepted as CLI flags which override values from file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Which feature extractor the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// Two hidden ReLU layers over flat vectors.
    Mlp,
    /// Four stride-2 conv blocks over C×32×32 images.
    TinyConv,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Mlp => "mlp",
            BackboneKind::TinyConv => "tiny_conv",
        }
    }
}

/// Batch reduction of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    Sum,
    Mean,
}

impl LossReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            LossReduction::Sum => "sum",
            LossReduction::Mean => "mean",
        }
    }
}

/// Model family trained by a run: the meta-embedding model or the plain
/// softmax baseline used for controlled comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Full,
    Plain,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::Plain => "plain",
        }
    }
}

/// Validated configuration; immutable after [`validate_config`].
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Objective.
    pub lambda_lm: f64,
    pub margin_m: f64,
    pub gamma_eps: f64,
    pub logit_scale_s: f64,
    pub loss_reduction: LossReduction,
    pub lm_nearest_negative: bool,
    pub hallucinate_softmax: bool,
    pub grad_through_gamma: bool,

    // Open-set decision.
    pub open_threshold: f64,

    // Dataset curation.
    pub pareto_alpha: f64,
    pub n_max: usize,
    pub n_min: usize,
    pub many_shot_min: usize,
    pub few_shot_max: usize,
    pub num_classes: usize,
    pub open_classes: usize,
    pub open_per_class: usize,
    pub test_per_class: usize,
    pub val_per_class: usize,

    // Architecture.
    pub embed_dim: usize,
    pub backbone: BackboneKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub conv_in_channels: usize,
    pub conv_image_size: usize,
    pub attention_reduction: usize,

    // Component toggles (the ablation axes).
    pub attention_enabled: bool,
    pub memory_enabled: bool,
    pub selector_enabled: bool,
    pub calibration_enabled: bool,
    pub model_variant: ModelVariant,

    // Optimization.
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub centroid_momentum: f64,

    // Synthetic source.
    pub synthetic_separation: f64,
    pub synthetic_noise: f64,
    /// Latent dimensionality of the class centers; 0 draws centers
    /// independently, r > 0 places them in a shared r-dimensional subspace
    /// so class structure is transferable.
    pub synthetic_latent_rank: usize,
    pub source: String,

    pub seed: u64,
}

/// Registry of every config key with its default value, in canonical order.
/// This is the single place defaults are written down; tests pin the
/// paper-fixed entries against it.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("lambda_lm", "0.1"),
    ("margin_m", "5.0"),
    ("gamma_eps", "1e-12"),
    ("logit_scale_s", "16"),
    ("loss_reduction", "sum"),
    ("lm_nearest_negative", "true"),
    ("hallucinate_softmax", "true"),
    ("grad_through_gamma", "false"),
    ("open_threshold", "0.1"),
    ("pareto_alpha", "6"),
    ("n_max", "500"),
    ("n_min", "5"),
    ("many_shot_min", "100"),
    ("few_shot_max", "20"),
    ("num_classes", "20"),
    ("open_classes", "5"),
    ("open_per_class", "50"),
    ("test_per_class", "50"),
    ("val_per_class", "20"),
    ("embed_dim", "16"),
    ("backbone", "mlp"),
    ("input_dim", "16"),
    ("hidden_dims", "64,64"),
    ("conv_in_channels", "3"),
    ("conv_image_size", "32"),
    ("attention_reduction", "2"),
    ("attention_enabled", "true"),
    ("memory_enabled", "true"),
    ("selector_enabled", "true"),
    ("calibration_enabled", "true"),
    ("model_variant", "full"),
    ("batch_size", "64"),
    ("classes_per_batch", "8"),
    ("epochs", "30"),
    ("learning_rate", "0.1"),
    ("lr_decay_factor", "0.1"),
    ("lr_decay_every", "10"),
    ("sgd_momentum", "0.9"),
    ("weight_decay", "0.0005"),
    ("centroid_momentum", "0.9"),
    ("synthetic_separation", "1.0"),
    ("synthetic_noise", "1.0"),
    ("synthetic_latent_rank", "0"),
    ("source", "synthetic"),
    ("seed", "0"),
];

fn err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn parse_f64(field: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| err(field, format!("expected a number, got {raw:?}")))
}

fn parse_usize(field: &str, raw: &str) -> Result<usize> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| err(field, format!("expected a nonnegative integer, got {raw:?}")))
}

fn parse_u64(field: &str, raw: &str) -> Result<u64> {
    raw.trim()
        .parse::<u64>()
        .map_err(|_| err(field, format!("expected a nonnegative integer, got {raw:?}")))
}

fn parse_bool(field: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(err(field, format!("expected true/false, got {other:?}"))),
    }
}

fn parse_usize_list(field: &str, raw: &str) -> Result<Vec<usize>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| parse_usize(field, part))
        .collect()
}

/// Validate a raw key-value map into a [`Config`], filling unspecified keys
/// from [`DEFAULTS`]. Unknown keys and invariant violations are rejected with
/// messages naming the offending field.
pub fn validate_config(raw: &BTreeMap<String, String>) -> Result<Config> {
    let known: BTreeMap<&str, &str> = DEFAULTS.iter().copied().collect();
    for key in raw.keys() {
        if !known.contains_key(key.as_str()) {
            return Err(err(key, "unknown configuration key"));
        }
    }
    let get = |key: &str| -> &str {
        raw.get(key)
            .map(String::as_str)
            .unwrap_or_else(|| known[key])
    };

    let lambda_lm = parse_f64("lambda_lm", get("lambda_lm"))?;
    if !lambda_lm.is_finite() || lambda_lm < 0.0 {
        return Err(err("lambda_lm", "must be a nonnegative real"));
    }
    let margin_m = parse_f64("margin_m", get("margin_m"))?;
    if !margin_m.is_finite() || margin_m < 0.0 {
        return Err(err("margin_m", "must be a nonnegative real"));
    }
    let gamma_eps = parse_f64("gamma_eps", get("gamma_eps"))?;
    if !gamma_eps.is_finite() || gamma_eps <= 0.0 {
        return Err(err("gamma_eps", "must be strictly positive"));
    }
    let logit_scale_s = parse_f64("logit_scale_s", get("logit_scale_s"))?;
    if !logit_scale_s.is_finite() || logit_scale_s <= 0.0 {
        return Err(err("logit_scale_s", "must be strictly positive"));
    }
    let loss_reduction = match get("loss_reduction") {
        "sum" => LossReduction::Sum,
        "mean" => LossReduction::Mean,
        other => return Err(err("loss_reduction", format!("expected sum|mean, got {other:?}"))),
    };
    let open_threshold = parse_f64("open_threshold", get("open_threshold"))?;
    if !(0.0..=1.0).contains(&open_threshold) {
        return Err(err("open_threshold", "must lie in [0, 1]"));
    }
    let pareto_alpha = parse_f64("pareto_alpha", get("pareto_alpha"))?;
    if !pareto_alpha.is_finite() || pareto_alpha <= 0.0 {
        return Err(err("pareto_alpha", "must be strictly positive"));
    }
    let n_max = parse_usize("n_max", get("n_max"))?;
    let n_min = parse_usize("n_min", get("n_min"))?;
    if n_max == 0 || n_min == 0 {
        return Err(err("n_min/n_max", "class sizes must be positive"));
    }
    if n_min > n_max {
        return Err(err(
            "n_min",
            format!("must not exceed n_max ({n_min} > {n_max})"),
        ));
    }
    let many_shot_min = parse_usize("many_shot_min", get("many_shot_min"))?;
    let few_shot_max = parse_usize("few_shot_max", get("few_shot_max"))?;
    if few_shot_max > many_shot_min {
        return Err(err(
            "few_shot_max",
            format!("must not exceed many_shot_min ({few_shot_max} > {many_shot_min})"),
        ));
    }
    let num_classes = parse_usize("num_classes", get("num_classes"))?;
    if num_classes == 0 {
        return Err(err("num_classes", "must be positive"));
    }
    let embed_dim = parse_usize("embed_dim", get("embed_dim"))?;
    if embed_dim == 0 {
        return Err(err("embed_dim", "must be positive"));
    }
    let backbone = match get("backbone") {
        "mlp" => BackboneKind::Mlp,
        "tiny_conv" => BackboneKind::TinyConv,
        other => return Err(err("backbone", format!("expected mlp|tiny_conv, got {other:?}"))),
    };
    let input_dim = parse_usize("input_dim", get("input_dim"))?;
    if input_dim == 0 {
        return Err(err("input_dim", "must be positive"));
    }
    let hidden_dims = parse_usize_list("hidden_dims", get("hidden_dims"))?;
    if hidden_dims.contains(&0) {
        return Err(err("hidden_dims", "layer widths must be positive"));
    }
    let conv_in_channels = parse_usize("conv_in_channels", get("conv_in_channels"))?;
    let conv_image_size = parse_usize("conv_image_size", get("conv_image_size"))?;
    if conv_in_channels == 0 || conv_image_size == 0 {
        return Err(err("conv_in_channels/conv_image_size", "must be positive"));
    }
    let attention_reduction = parse_usize("attention_reduction", get("attention_reduction"))?;
    if attention_reduction == 0 {
        return Err(err("attention_reduction", "must be positive"));
    }
    let model_variant = match get("model_variant") {
        "full" => ModelVariant::Full,
        "plain" => ModelVariant::Plain,
        other => return Err(err("model_variant", format!("expected full|plain, got {other:?}"))),
    };
    let batch_size = parse_usize("batch_size", get("batch_size"))?;
    let classes_per_batch = parse_usize("classes_per_batch", get("classes_per_batch"))?;
    if batch_size == 0 || classes_per_batch == 0 {
        return Err(err("batch_size/classes_per_batch", "must be positive"));
    }
    let learning_rate = parse_f64("learning_rate", get("learning_rate"))?;
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(err("learning_rate", "must be strictly positive"));
    }
    let lr_decay_factor = parse_f64("lr_decay_factor", get("lr_decay_factor"))?;
    if !lr_decay_factor.is_finite() || lr_decay_factor <= 0.0 {
        return Err(err("lr_decay_factor", "must be strictly positive"));
    }
    let lr_decay_every = parse_usize("lr_decay_every", get("lr_decay_every"))?;
    if lr_decay_every == 0 {
        return Err(err("lr_decay_every", "must be positive"));
    }
    let sgd_momentum = parse_f64("sgd_momentum", get("sgd_momentum"))?;
    if !(0.0..1.0).contains(&sgd_momentum) {
        return Err(err("sgd_momentum", "must lie in [0, 1)"));
    }
    let weight_decay = parse_f64("weight_decay", get("weight_decay"))?;
    if !weight_decay.is_finite() || weight_decay < 0.0 {
        return Err(err("weight_decay", "must be a nonnegative real"));
    }
    let centroid_momentum = parse_f64("centroid_momentum", get("centroid_momentum"))?;
    if !(0.0..1.0).contains(&centroid_momentum) {
        return Err(err("centroid_momentum", "must lie in [0, 1)"));
    }
    let synthetic_separation = parse_f64("synthetic_separation", get("synthetic_separation"))?;
    let synthetic_noise = parse_f64("synthetic_noise", get("synthetic_noise"))?;
    if !synthetic_separation.is_finite() || synthetic_separation <= 0.0 {
        return Err(err("synthetic_separation", "must be strictly positive"));
    }
    if !synthetic_noise.is_finite() || synthetic_noise <= 0.0 {
        return Err(err("synthetic_noise", "must be strictly positive"));
    }

    Ok(Config {
        lambda_lm,
        margin_m,
        gamma_eps,
        logit_scale_s,
        loss_reduction,
        lm_nearest_negative: parse_bool("lm_nearest_negative", get("lm_nearest_negative"))?,
        hallucinate_softmax: parse_bool("hallucinate_softmax", get("hallucinate_softmax"))?,
        grad_through_gamma: parse_bool("grad_through_gamma", get("grad_through_gamma"))?,
        open_threshold,
        pareto_alpha,
        n_max,
        n_min,
        many_shot_min,
        few_shot_max,
        num_classes,
        open_classes: parse_usize("open_classes", get("open_classes"))?,
        open_per_class: parse_usize("open_per_class", get("open_per_class"))?,
        test_per_class: parse_usize("test_per_class", get("test_per_class"))?,
        val_per_class: parse_usize("val_per_class", get("val_per_class"))?,
        embed_dim,
        backbone,
        input_dim,
        hidden_dims,
        conv_in_channels,
        conv_image_size,
        attention_reduction,
        attention_enabled: parse_bool("attention_enabled", get("attention_enabled"))?,
        memory_enabled: parse_bool("memory_enabled", get("memory_enabled"))?,
        selector_enabled: parse_bool("selector_enabled", get("selector_enabled"))?,
        calibration_enabled: parse_bool("calibration_enabled", get("calibration_enabled"))?,
        model_variant,
        batch_size,
        classes_per_batch,
        epochs: parse_usize("epochs", get("epochs"))?,
        learning_rate,
        lr_decay_factor,
        lr_decay_every,
        sgd_momentum,
        weight_decay,
        centroid_momentum,
        synthetic_separation,
        synthetic_noise,
        synthetic_latent_rank: parse_usize("synthetic_latent_rank", get("synthetic_latent_rank"))?,
        source: get("source").to_string(),
        seed: parse_u64("seed", get("seed"))?,
    })
}

/// Parse flat `key = value` text (one pair per line, `#` starts a comment).
pub fn parse_flat_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl Config {
    /// Validate straight from flat text.
    pub fn from_flat_text(text: &str) -> Result<Self> {
        validate_config(&parse_flat_text(text)?)
    }

    /// Default configuration (every key from [`DEFAULTS`]).
    pub fn default_config() -> Self {
        validate_config(&BTreeMap::new()).expect("defaults registry must validate")
    }

    /// Serialize back to the flat text format, keys in registry order.
    /// `validate_config(parse(to_flat_text()))` reproduces `self` exactly.
    pub fn to_flat_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in DEFAULTS {
            let value = self.value_string(key);
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    fn value_string(&self, key: &str) -> String {
        match key {
            "lambda_lm" => self.lambda_lm.to_string(),
            "margin_m" => self.margin_m.to_string(),
            "gamma_eps" => self.gamma_eps.to_string(),
            "logit_scale_s" => self.logit_scale_s.to_string(),
            "loss_reduction" => self.loss_reduction.as_str().to_string(),
            "lm_nearest_negative" => self.lm_nearest_negative.to_string(),
            "hallucinate_softmax" => self.hallucinate_softmax.to_string(),
            "grad_through_gamma" => self.grad_through_gamma.to_string(),
            "open_threshold" => self.open_threshold.to_string(),
            "pareto_alpha" => self.pareto_alpha.to_string(),
            "n_max" => self.n_max.to_string(),
            "n_min" => self.n_min.to_string(),
            "many_shot_min" => self.many_shot_min.to_string(),
            "few_shot_max" => self.few_shot_max.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "open_classes" => self.open_classes.to_string(),
            "open_per_class" => self.open_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "val_per_class" => self.val_per_class.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "backbone" => self.backbone.as_str().to_string(),
            "input_dim" => self.input_dim.to_string(),
            "hidden_dims" => self
                .hidden_dims
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "conv_in_channels" => self.conv_in_channels.to_string(),
            "conv_image_size" => self.conv_image_size.to_string(),
            "attention_reduction" => self.attention_reduction.to_string(),
            "attention_enabled" => self.attention_enabled.to_string(),
            "memory_enabled" => self.memory_enabled.to_string(),
            "selector_enabled" => self.selector_enabled.to_string(),
            "calibration_enabled" => self.calibration_enabled.to_string(),
            "model_variant" => self.model_variant.as_str().to_string(),
            "batch_size" => self.batch_size.to_string(),
            "classes_per_batch" => self.classes_per_batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "lr_decay_every" => self.lr_decay_every.to_string(),
            "sgd_momentum" => self.sgd_momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "centroid_momentum" => self.centroid_momentum.to_string(),
            "synthetic_separation" => self.synthetic_separation.to_string(),
            "synthetic_noise" => self.synthetic_noise.to_string(),
            "synthetic_latent_rank" => self.synthetic_latent_rank.to_string(),
            "source" => self.source.clone(),
            "seed" => self.seed.to_string(),
            other => unreachable!("unknown registry key {other}"),
        }
    }

    /// Expected input length for one example under this configuration.
    pub fn input_len(&self) -> usize {
        match self.backbone {
            BackboneKind::Mlp => self.input_dim,
            BackboneKind::TinyConv => {
                self.conv_in_channels * self.conv_image_size * self.conv_image_size
            }
        }
    }
}
