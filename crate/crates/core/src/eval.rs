//! Closed- and open-set evaluation: thresholded unknown rejection, per-shot
//! accuracies, the open-set F-measure, and sweep curves.

use serde::Serialize;

use crate::centroid::CentroidMemory;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{forward_sample, ModelParams};
use crate::parallel::map_collect;
use crate::types::{Label, LabeledExample, ShotCategory};

/// Thresholded open-set decision: the argmax class when its probability
/// reaches the threshold, OPEN otherwise. Ties break to the lowest class
/// index.
pub fn predict_open(class_probabilities: &[f64], threshold: f64) -> Result<Label> {
    if class_probabilities.is_empty() {
        return Err(Error::MalformedDistribution("empty distribution".into()));
    }
    let mut sum = 0.0;
    for &p in class_probabilities {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::MalformedDistribution(format!(
                "probability {p} out of range"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::MalformedDistribution(format!(
            "probabilities sum to {sum}, expected 1"
        )));
    }
    let mut best = 0;
    for (i, &p) in class_probabilities.iter().enumerate() {
        if p > class_probabilities[best] {
            best = i;
        }
    }
    if class_probabilities[best] >= threshold {
        Ok(Label::Known(best))
    } else {
        Ok(Label::Open)
    }
}

/// Accuracy over one shot subset; `None` when the subset is empty.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ShotAccuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Per-shot and overall top-1 accuracy over closed samples. Predictions may
/// contain OPEN decisions, which count as wrong everywhere.
pub fn accuracy_by_shot(
    predictions: &[Label],
    labels: &[usize],
    shot_partition: &[ShotCategory],
) -> Result<ShotAccuracy> {
    assert_eq!(predictions.len(), labels.len());
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    let mut overall_correct = 0usize;
    for (pred, &label) in predictions.iter().zip(labels) {
        let category = *shot_partition.get(label).ok_or(Error::LabelOutOfRange {
            label,
            num_classes: shot_partition.len(),
        })?;
        let idx = match category {
            ShotCategory::Many => 0,
            ShotCategory::Medium => 1,
            ShotCategory::Few => 2,
        };
        total[idx] += 1;
        if *pred == Label::Known(label) {
            correct[idx] += 1;
            overall_correct += 1;
        }
    }
    let ratio = |i: usize| {
        if total[i] == 0 {
            None
        } else {
            Some(correct[i] as f64 / total[i] as f64)
        }
    };
    let n: usize = total.iter().sum();
    Ok(ShotAccuracy {
        overall: if n == 0 { 0.0 } else { overall_correct as f64 / n as f64 },
        many: ratio(0),
        medium: ratio(1),
        few: ratio(2),
    })
}

/// Open-set F-measure. True positives are correct closed predictions, false
/// positives are wrong predictions on the closed set (including rejections),
/// false negatives are open samples accepted as some known class.
/// `F = 2pr/(p+r)`, 0 when `p + r = 0`.
pub fn f_measure(predictions: &[Label], truths: &[Label]) -> f64 {
    assert_eq!(predictions.len(), truths.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (pred, truth) in predictions.iter().zip(truths) {
        match truth {
            Label::Known(_) => {
                if pred == truth {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            Label::Open => {
                if !pred.is_open() {
                    fn_ += 1;
                }
            }
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Class probabilities plus diagnostics for one scored sample.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub probs: Vec<f64>,
    pub gamma: Option<f64>,
    pub squashed_norm: Option<f64>,
}

/// Run the model over a split and keep softmax probabilities; everything
/// downstream (reports, sweeps) works from these scores.
pub fn score_samples(
    params: &ModelParams,
    memory: &CentroidMemory,
    cfg: &Config,
    examples: &[LabeledExample],
) -> Result<Vec<ScoredSample>> {
    map_collect(examples, |ex| {
        forward_sample(params, Some(memory), cfg, &ex.input).map(|fwd| ScoredSample {
            id: ex.id.clone(),
            label: ex.label,
            probs: fwd.probabilities(),
            gamma: fwd.gamma(),
            squashed_norm: fwd.squashed_norm,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub overall_open_accuracy: f64,
    pub f_measure: f64,
    pub non_open_predictions: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OpenCountPoint {
    pub open_classes: usize,
    pub overall_open_accuracy: f64,
    pub f_measure: f64,
}

/// Full evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub threshold: f64,
    /// Closed-set protocol: closed test samples, plain argmax.
    pub closed: ShotAccuracy,
    /// Open-set protocol: thresholded decisions over the mixed test set;
    /// per-shot numbers cover the closed samples, `overall` counts every
    /// sample with all open classes folded into one OPEN label.
    pub open: ShotAccuracy,
    pub open_overall: f64,
    pub f_measure: f64,
    pub mean_squashed_norm_closed: Option<f64>,
    pub mean_squashed_norm_open: Option<f64>,
    pub threshold_curve: Vec<ThresholdPoint>,
    pub open_class_curve: Vec<OpenCountPoint>,
}

fn mixed_open_metrics(
    closed: &[ScoredSample],
    open: &[ScoredSample],
    threshold: f64,
) -> Result<(f64, f64, usize)> {
    let mut preds = Vec::with_capacity(closed.len() + open.len());
    let mut truths = Vec::with_capacity(closed.len() + open.len());
    let mut correct = 0usize;
    let mut non_open = 0usize;
    for sample in closed.iter().chain(open) {
        let pred = predict_open(&sample.probs, threshold)?;
        if !pred.is_open() {
            non_open += 1;
        }
        if pred == sample.label || (pred.is_open() && sample.label.is_open()) {
            correct += 1;
        }
        preds.push(pred);
        truths.push(sample.label);
    }
    let total = preds.len().max(1);
    Ok((
        correct as f64 / total as f64,
        f_measure(&preds, &truths),
        non_open,
    ))
}

/// Evaluate scored splits at one threshold.
pub fn report_from_scores(
    closed: &[ScoredSample],
    open: &[ScoredSample],
    shot_partition: &[ShotCategory],
    threshold: f64,
) -> Result<EvalReport> {
    let closed_labels: Vec<usize> = closed
        .iter()
        .map(|s| s.label.known().expect("closed split carries known labels"))
        .collect();

    // Closed protocol: argmax, no rejection.
    let closed_preds: Result<Vec<Label>> =
        closed.iter().map(|s| predict_open(&s.probs, 0.0)).collect();
    let closed_acc = accuracy_by_shot(&closed_preds?, &closed_labels, shot_partition)?;

    // Open protocol at the configured threshold.
    let open_preds: Result<Vec<Label>> = closed
        .iter()
        .map(|s| predict_open(&s.probs, threshold))
        .collect();
    let open_shot = accuracy_by_shot(&open_preds?, &closed_labels, shot_partition)?;
    let (open_overall, f, _) = mixed_open_metrics(closed, open, threshold)?;

    let mean_norm = |samples: &[ScoredSample]| {
        let norms: Vec<f64> = samples.iter().filter_map(|s| s.squashed_norm).collect();
        if norms.is_empty() {
            None
        } else {
            Some(norms.iter().sum::<f64>() / norms.len() as f64)
        }
    };

    Ok(EvalReport {
        threshold,
        closed: closed_acc,
        open: open_shot,
        open_overall,
        f_measure: f,
        mean_squashed_norm_closed: mean_norm(closed),
        mean_squashed_norm_open: mean_norm(open),
        threshold_curve: Vec::new(),
        open_class_curve: Vec::new(),
    })
}

/// Evaluate a model over the curated test splits.
pub fn evaluate(
    params: &ModelParams,
    memory: &CentroidMemory,
    cfg: &Config,
    test_closed: &[LabeledExample],
    test_open: &[LabeledExample],
    shot_partition: &[ShotCategory],
) -> Result<EvalReport> {
    let closed = score_samples(params, memory, cfg, test_closed)?;
    let open = score_samples(params, memory, cfg, test_open)?;
    report_from_scores(&closed, &open, shot_partition, cfg.open_threshold)
}

/// Open-setting metrics across a threshold grid.
pub fn sweep_thresholds(
    closed: &[ScoredSample],
    open: &[ScoredSample],
    grid: &[f64],
) -> Result<Vec<ThresholdPoint>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    grid.iter()
        .map(|&threshold| {
            let (acc, f, non_open) = mixed_open_metrics(closed, open, threshold)?;
            Ok(ThresholdPoint {
                threshold,
                overall_open_accuracy: acc,
                f_measure: f,
                non_open_predictions: non_open,
            })
        })
        .collect()
}

/// F-measure as a function of how many open classes contaminate the test
/// set. Open samples are grouped per class in manifest order (`per_class`
/// consecutive samples each).
pub fn sweep_open_class_counts(
    closed: &[ScoredSample],
    open: &[ScoredSample],
    per_class: usize,
    grid: &[usize],
    threshold: f64,
) -> Result<Vec<OpenCountPoint>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let available = open.len().checked_div(per_class).unwrap_or(0);
    grid.iter()
        .map(|&count| {
            if count > available {
                return Err(Error::Config(format!(
                    "open-class sweep requested {count} classes, split holds {available}"
                )));
            }
            let subset = &open[..count * per_class];
            let (acc, f, _) = mixed_open_metrics(closed, subset, threshold)?;
            Ok(OpenCountPoint {
                open_classes: count,
                overall_open_accuracy: acc,
                f_measure: f,
            })
        })
        .collect()
}

/// CSV rendering of a threshold curve (one row per grid point).
pub fn threshold_curve_csv(points: &[ThresholdPoint]) -> String {
    let mut out = String::from("threshold,overall_open_accuracy,f_measure,non_open_predictions\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.threshold, p.overall_open_accuracy, p.f_measure, p.non_open_predictions
        ));
    }
    out
}

pub fn open_class_curve_csv(points: &[OpenCountPoint]) -> String {
    let mut out = String::from("open_classes,overall_open_accuracy,f_measure\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.open_classes, p.overall_open_accuracy, p.f_measure
        ));
    }
    out
}
