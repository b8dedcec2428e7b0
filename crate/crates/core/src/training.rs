//! End-to-end optimization: SGD with momentum over all parameter groups,
//! alternating with centroid updates. Within one step, loss gradients are
//! computed against the pre-update centroid snapshot; centroids move only
//! after the parameter step, from the batch's direct features.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::centroid::{update_centroids, CentroidMemory};
use crate::checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointData, CheckpointMeta, NamedTensor,
    CHECKPOINT_VERSION,
};
use crate::config::{Config, LossReduction, ModelVariant};
use crate::data::{shuffled_batches, ClassAwareBatches, CuratedDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward_sample, sample_grads, LossBreakdown, ModelParams};
use crate::params::ParamSet;
use crate::parallel::map_collect;
use crate::rng::indexed_stream;
use crate::types::{Label, LabeledExample};

/// Momentum buffers, flattened in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    momenta: Vec<f64>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            momenta: vec![0.0; params.param_count()],
        }
    }

    /// `buf ← momentum·buf + grad + wd·param; param ← param − lr·buf`
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let flat = grads.flatten();
        let mut offset = 0;
        params.visit_mut(&mut |_, _, data| {
            for value in data.iter_mut() {
                let buf = momentum * self.momenta[offset] + flat[offset] + weight_decay * *value;
                self.momenta[offset] = buf;
                *value -= lr * buf;
                offset += 1;
            }
        });
        debug_assert_eq!(offset, flat.len());
    }

    pub fn momenta(&self) -> &[f64] {
        &self.momenta
    }
}

/// Everything a run mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ModelParams,
    pub memory: CentroidMemory,
    pub opt: SgdState,
    /// Completed epochs.
    pub epoch: usize,
}

/// Initialize parameters and (for the full variant) the centroid memory with
/// one extraction pass over the training split.
pub fn init_state(train: &[LabeledExample], cfg: &Config) -> Result<ModelState> {
    let params = ModelParams::init(cfg);
    let memory = match cfg.model_variant {
        ModelVariant::Full => {
            let spec = crate::backbone::BackboneSpec::from_config(cfg);
            let features = map_collect(train, |ex| {
                crate::backbone::extract(
                    &ex.input,
                    &spec,
                    &params.backbone,
                    &params.attention,
                    cfg.attention_enabled,
                )
            });
            let mut pairs = Vec::with_capacity(train.len());
            for (ex, feat) in train.iter().zip(features) {
                let feat = feat?;
                if let Label::Known(y) = ex.label {
                    pairs.push((y, feat));
                }
            }
            CentroidMemory::from_class_means(cfg.num_classes, cfg.embed_dim, pairs)?
        }
        ModelVariant::Plain => CentroidMemory::new(Matrix::zeros(cfg.num_classes, cfg.embed_dim)),
    };
    let opt = SgdState::new(&params);
    Ok(ModelState {
        params,
        memory,
        opt,
        epoch: 0,
    })
}

/// Per-step metrics (per-sample means, so runs with different reductions
/// stay comparable).
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss: LossBreakdown,
    pub accuracy: f64,
    pub gamma_min: Option<f64>,
    pub gamma_mean: Option<f64>,
    pub gamma_max: Option<f64>,
}

/// One optimization step over a batch.
pub fn train_step(
    batch: &[&LabeledExample],
    state: &mut ModelState,
    cfg: &Config,
    lr: f64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let snapshot = state.memory.clone();
    let per_sample = map_collect(batch, |ex| {
        sample_grads(&state.params, Some(&snapshot), cfg, ex)
    });

    let n = batch.len() as f64;
    let grad_scale = match cfg.loss_reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / n,
    };

    let mut total_grads = state.params.zeros_like();
    let mut ce_sum = 0.0;
    let mut lm_sum = 0.0;
    let mut correct = 0usize;
    let mut features = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut gammas = Vec::new();
    for (ex, result) in batch.iter().zip(per_sample) {
        let (loss, grads, feature, gamma) = result?;
        ce_sum += loss.ce;
        lm_sum += loss.lm;
        if loss.correct {
            correct += 1;
        }
        total_grads.accumulate(&grads, grad_scale);
        features.push(feature);
        labels.push(match ex.label {
            Label::Known(y) => y,
            Label::Open => unreachable!("sample_grads rejects open labels"),
        });
        if let Some(g) = gamma {
            gammas.push(g);
        }
    }

    let reduced = match cfg.loss_reduction {
        LossReduction::Sum => LossBreakdown {
            total: ce_sum + cfg.lambda_lm * lm_sum,
            ce: ce_sum,
            lm: lm_sum,
        },
        LossReduction::Mean => LossBreakdown {
            total: (ce_sum + cfg.lambda_lm * lm_sum) / n,
            ce: ce_sum / n,
            lm: lm_sum / n,
        },
    };
    if !reduced.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss diverged: ce={} lm={} gamma_min={:?} epoch={}",
            reduced.ce,
            reduced.lm,
            gammas.iter().cloned().reduce(f64::min),
            state.epoch
        )));
    }

    state.opt.step(
        &mut state.params,
        &total_grads,
        lr,
        cfg.sgd_momentum,
        cfg.weight_decay,
    );

    // Centroids move strictly after the parameter step, from this batch's
    // direct features.
    if cfg.model_variant == ModelVariant::Full {
        update_centroids(&features, &labels, &mut state.memory, cfg.centroid_momentum)?;
    }

    let (gamma_min, gamma_mean, gamma_max) = if gammas.is_empty() {
        (None, None, None)
    } else {
        let min = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = gammas.iter().sum::<f64>() / gammas.len() as f64;
        (Some(min), Some(mean), Some(max))
    };
    Ok(StepMetrics {
        loss: reduced,
        accuracy: correct as f64 / n,
        gamma_min,
        gamma_mean,
        gamma_max,
    })
}

/// Closed-set argmax accuracy over a split.
pub fn closed_accuracy(
    params: &ModelParams,
    memory: &CentroidMemory,
    cfg: &Config,
    examples: &[LabeledExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let outcomes = map_collect(examples, |ex| {
        forward_sample(params, Some(memory), cfg, &ex.input).map(|fwd| {
            let mut best = 0;
            for (i, &l) in fwd.logits.iter().enumerate() {
                if l > fwd.logits[best] {
                    best = i;
                }
            }
            ex.label == Label::Known(best)
        })
    });
    let mut correct = 0usize;
    for o in outcomes {
        if o? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// One JSON object per epoch in the metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_ce: f64,
    pub train_lm: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub gamma_min: Option<f64>,
    pub gamma_mean: Option<f64>,
    pub gamma_max: Option<f64>,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// When set, fit writes `metrics.jsonl`, `last.ckpt` and `best.ckpt`
    /// under this directory.
    pub run_dir: Option<&'a Path>,
    /// Resume from `last.ckpt` in the run directory.
    pub resume: bool,
}

pub struct FitResult {
    pub state: ModelState,
    pub best_state: ModelState,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub metrics: Vec<EpochMetrics>,
}

fn learning_rate_for(cfg: &Config, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Train for `cfg.epochs` epochs over class-aware batches (the plain
/// baseline uses ordinary shuffled batches). The best checkpoint is selected
/// by validation overall accuracy.
pub fn fit(data: &CuratedDataset, cfg: &Config, opts: &FitOptions) -> Result<FitResult> {
    let mut state = if opts.resume {
        let dir = opts
            .run_dir
            .ok_or_else(|| Error::Config("resume requires a run directory".into()))?;
        let ckpt = read_checkpoint(&dir.join("last.ckpt"))?;
        state_from_checkpoint(&ckpt, cfg)?
    } else {
        init_state(&data.train, cfg)?
    };

    let labels: Vec<usize> = data
        .train
        .iter()
        .map(|ex| match ex.label {
            Label::Known(y) => y,
            Label::Open => usize::MAX,
        })
        .collect();
    if labels.contains(&usize::MAX) {
        return Err(Error::Format("open label in the training split".into()));
    }
    let batches_per_epoch = data.train.len().div_ceil(cfg.batch_size).max(1);

    let mut log = match opts.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(opts.resume)
                .truncate(!opts.resume)
                .write(true)
                .open(dir.join("metrics.jsonl"))?;
            Some(file)
        }
        None => None,
    };

    let mut best_state = state.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = state.epoch;
    let mut metrics_out = Vec::new();

    for epoch in state.epoch..cfg.epochs {
        let lr = learning_rate_for(cfg, epoch);
        let batches: Vec<Vec<usize>> = match cfg.model_variant {
            ModelVariant::Full => {
                ClassAwareBatches::new(
                    &labels,
                    cfg.num_classes,
                    cfg.batch_size,
                    cfg.classes_per_batch,
                    crate::rng::derive_seed(cfg.seed, "epoch.batches", epoch as u64),
                )?
                .take(batches_per_epoch)
                .collect()
            }
            ModelVariant::Plain => {
                let mut rng = indexed_stream(cfg.seed, "epoch.shuffle", epoch as u64);
                shuffled_batches(data.train.len(), cfg.batch_size, &mut rng)
            }
        };

        let mut epoch_ce = 0.0;
        let mut epoch_lm = 0.0;
        let mut epoch_correct = 0.0;
        let mut epoch_samples = 0.0;
        let mut gmin = f64::INFINITY;
        let mut gmax = f64::NEG_INFINITY;
        let mut gsum = 0.0;
        let mut gcount = 0.0;
        for batch_indices in &batches {
            let batch: Vec<&LabeledExample> =
                batch_indices.iter().map(|&i| &data.train[i]).collect();
            let step = train_step(&batch, &mut state, cfg, lr)?;
            let n = batch.len() as f64;
            // Convert the reduced loss back to per-sample sums for logging.
            let factor = match cfg.loss_reduction {
                LossReduction::Sum => 1.0,
                LossReduction::Mean => n,
            };
            epoch_ce += step.loss.ce * factor;
            epoch_lm += step.loss.lm * factor;
            epoch_correct += step.accuracy * n;
            epoch_samples += n;
            if let (Some(min), Some(mean), Some(max)) =
                (step.gamma_min, step.gamma_mean, step.gamma_max)
            {
                gmin = gmin.min(min);
                gmax = gmax.max(max);
                gsum += mean * n;
                gcount += n;
            }
        }
        state.epoch = epoch + 1;

        let val_accuracy = closed_accuracy(&state.params, &state.memory, cfg, &data.val)?;
        let entry = EpochMetrics {
            epoch: state.epoch,
            lr,
            train_total: (epoch_ce + cfg.lambda_lm * epoch_lm) / epoch_samples,
            train_ce: epoch_ce / epoch_samples,
            train_lm: epoch_lm / epoch_samples,
            train_accuracy: epoch_correct / epoch_samples,
            val_accuracy,
            gamma_min: (gcount > 0.0).then_some(gmin),
            gamma_mean: (gcount > 0.0).then(|| gsum / gcount),
            gamma_max: (gcount > 0.0).then_some(gmax),
        };
        if let Some(file) = log.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(file, "{line}")?;
        }
        metrics_out.push(entry);

        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_state = state.clone();
            best_epoch = state.epoch;
            if let Some(dir) = opts.run_dir {
                write_checkpoint(
                    &dir.join("best.ckpt"),
                    &state_to_checkpoint(&state, cfg, Some(val_accuracy)),
                )?;
            }
        }
        if let Some(dir) = opts.run_dir {
            write_checkpoint(
                &dir.join("last.ckpt"),
                &state_to_checkpoint(&state, cfg, Some(val_accuracy)),
            )?;
        }
    }

    if best_val == f64::NEG_INFINITY {
        // Zero-epoch run: fall back to the initial state.
        best_val = 0.0;
        if let Some(dir) = opts.run_dir {
            write_checkpoint(&dir.join("last.ckpt"), &state_to_checkpoint(&state, cfg, None))?;
            write_checkpoint(&dir.join("best.ckpt"), &state_to_checkpoint(&state, cfg, None))?;
        }
    }

    Ok(FitResult {
        best_state,
        best_epoch,
        best_val_acc: best_val,
        state,
        metrics: metrics_out,
    })
}

/// Pack a training state into the on-disk checkpoint structure.
pub fn state_to_checkpoint(
    state: &ModelState,
    cfg: &Config,
    best_val_acc: Option<f64>,
) -> CheckpointData {
    let mut tensors = Vec::new();
    state.params.visit(&mut |name, shape, data| {
        tensors.push(NamedTensor {
            name: format!("param.{name}"),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    });
    tensors.push(NamedTensor {
        name: "memory.centroids".into(),
        shape: vec![state.memory.num_classes(), state.memory.dim()],
        data: state.memory.as_matrix().data().to_vec(),
    });
    tensors.push(NamedTensor {
        name: "opt.momenta".into(),
        shape: vec![state.opt.momenta().len()],
        data: state.opt.momenta().to_vec(),
    });
    CheckpointData {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            variant: cfg.model_variant.as_str().to_string(),
            epoch: state.epoch,
            best_val_acc,
            config_text: cfg.to_flat_text(),
        },
        tensors,
    }
}

/// Rebuild a training state from a checkpoint. Tensor shapes must match the
/// architecture the config describes.
pub fn state_from_checkpoint(data: &CheckpointData, cfg: &Config) -> Result<ModelState> {
    if data.meta.variant != cfg.model_variant.as_str() {
        return Err(Error::Config(format!(
            "checkpoint was trained with variant {}, config requests {}",
            data.meta.variant,
            cfg.model_variant.as_str()
        )));
    }
    let mut params = ModelParams::init(cfg);
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, shape, dest| {
        let key = format!("param.{name}");
        match data.tensors.iter().find(|t| t.name == key) {
            Some(t) if t.shape == shape && t.data.len() == dest.len() => {
                dest.copy_from_slice(&t.data);
            }
            Some(t) => missing.push(format!("{key}: shape {:?} != {:?}", t.shape, shape)),
            None => missing.push(format!("{key}: absent")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint does not match the configured architecture: {}",
            missing.join("; ")
        )));
    }

    let mem = data
        .tensor("memory.centroids")
        .ok_or_else(|| Error::Format("checkpoint lacks memory.centroids".into()))?;
    if mem.shape != [cfg.num_classes, cfg.embed_dim] {
        return Err(Error::Format(format!(
            "memory.centroids shape {:?} does not match K={} d={}",
            mem.shape, cfg.num_classes, cfg.embed_dim
        )));
    }
    let memory = CentroidMemory::new(Matrix::from_vec(
        cfg.num_classes,
        cfg.embed_dim,
        mem.data.clone(),
    ));

    let mut opt = SgdState::new(&params);
    let momenta = data
        .tensor("opt.momenta")
        .ok_or_else(|| Error::Format("checkpoint lacks opt.momenta".into()))?;
    if momenta.data.len() != opt.momenta.len() {
        return Err(Error::Format("optimizer state size mismatch".into()));
    }
    opt.momenta.copy_from_slice(&momenta.data);

    Ok(ModelState {
        params,
        memory,
        opt,
        epoch: data.meta.epoch,
    })
}
