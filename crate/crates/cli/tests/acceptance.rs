//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities (run with `--nocapture` to see them all).
//!
//! Criteria 5–7 share one benchmark: a synthetic Gaussian-mixture task with
//! 20 long-tailed closed classes (α=6, 500→5 samples) and 5 open classes,
//! trained over 5 seeds for the full model, the plain baseline, and the
//! full model without its memory feature.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::OnceLock;

use oltr_core::centroid::CentroidMemory;
use oltr_core::classifier::squash;
use oltr_core::config::{validate_config, Config, ModelVariant};
use oltr_core::data::{pareto_counts, pareto_longtail_split, shot_partition, SyntheticSource};
use oltr_core::embed::{compose_memory_feature, reachability};
use oltr_core::eval::{
    f_measure, report_from_scores, score_samples, sweep_thresholds, EvalReport, ThresholdPoint,
};
use oltr_core::gradcheck::{gradcheck_over_seeds, Component};
use oltr_core::linalg::{dot, norm, Matrix};
use oltr_core::rng::stream;
use oltr_core::training::{fit, FitOptions};
use oltr_core::types::{Label, ShotCategory};
use rand::Rng;

fn cfg_from(pairs: &[(&str, &str)]) -> Config {
    let map: BTreeMap<String, String> = pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    validate_config(&map).expect("benchmark config must validate")
}

// ---------------------------------------------------------------------
// Criterion 1: squashing norm law and direction preservation.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_squash_law() {
    let mut rng = stream(1, "acceptance-squash");
    let mut worst_norm_err: f64 = 0.0;
    let mut worst_angle: f64 = 0.0;
    for &r in &[0.0f64, 0.01, 0.5, 1.0, 3.0, 100.0] {
        for _ in 0..20 {
            let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = norm(&dir);
            if d < 1e-3 {
                continue;
            }
            let v: Vec<f64> = dir.iter().map(|x| x * r / d).collect();
            let s = squash(&v);
            let want = r * r / (1.0 + r * r);
            worst_norm_err = worst_norm_err.max((norm(&s) - want).abs());
            if r > 0.0 {
                // Small-angle estimator: the length of the component of s
                // orthogonal to v (acos near 1 cannot resolve 1e-9).
                let vn = norm(&v);
                let proj = dot(&v, &s) / (vn * vn);
                let perp: Vec<f64> = s.iter().zip(&v).map(|(si, vi)| si - proj * vi).collect();
                let sine = norm(&perp) / norm(&s).max(1e-300);
                worst_angle = worst_angle.max(sine.min(1.0).asin());
            }
        }
    }
    assert!(worst_norm_err < 1e-9, "norm law error {worst_norm_err}");
    assert!(worst_angle < 1e-9, "direction error {worst_angle}");
    println!(
        "[PASS] criterion 1: squash norm law within {worst_norm_err:.2e}, direction within {worst_angle:.2e} rad"
    );
}

// ---------------------------------------------------------------------
// Criterion 2: analytic gradients vs central finite differences.
// ---------------------------------------------------------------------

#[test]
fn criterion_2_gradient_verification() {
    let mut summary = String::new();
    for component in Component::ALL {
        let worst = gradcheck_over_seeds(component, 0..10);
        assert!(
            worst < 1e-4,
            "{} gradient check failed: {worst:.3e}",
            component.name()
        );
        summary.push_str(&format!("{}={:.1e} ", component.name(), worst));
    }
    println!("[PASS] criterion 2: gradcheck max relative errors {summary}");
}

// ---------------------------------------------------------------------
// Criterion 3: oracle equivalences.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_oracle_equivalences() {
    let mut rng = stream(3, "acceptance-oracles");

    // f_measure against brute-force counting on 100 random 50-sample sets.
    for _ in 0..100 {
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for _ in 0..50 {
            truths.push(if rng.gen_bool(0.3) {
                Label::Open
            } else {
                Label::Known(rng.gen_range(0..6))
            });
            preds.push(if rng.gen_bool(0.25) {
                Label::Open
            } else {
                Label::Known(rng.gen_range(0..6))
            });
        }
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for (p, t) in preds.iter().zip(&truths) {
            match t {
                Label::Known(_) if p == t => tp += 1.0,
                Label::Known(_) => fp += 1.0,
                Label::Open if !p.is_open() => fnn += 1.0,
                Label::Open => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let want = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        assert_eq!(f_measure(&preds, &truths), want, "f_measure oracle mismatch");
    }

    // Memory composition against an explicit loop-sum, 1e-12.
    for _ in 0..50 {
        let (k, d) = (rng.gen_range(2..8), rng.gen_range(2..6));
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let memory = CentroidMemory::new(Matrix::from_vec(k, d, flat));
        let o: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = compose_memory_feature(&o, &memory).unwrap();
        for dim in 0..d {
            let want: f64 = (0..k).map(|i| o[i] * rows[i][dim]).sum();
            assert!((got[dim] - want).abs() < 1e-12, "compose oracle mismatch");
        }
    }

    // Reachability against an explicit loop-min, exact.
    for _ in 0..50 {
        let (k, d) = (rng.gen_range(1..8), rng.gen_range(2..6));
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let memory = CentroidMemory::new(Matrix::from_vec(k, d, flat));
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut want = f64::INFINITY;
        for row in &rows {
            let dist: f64 = v
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            want = want.min(dist);
        }
        assert_eq!(
            reachability(&v, &memory, 1e-12).unwrap(),
            want.max(1e-12),
            "reachability oracle mismatch"
        );
    }
    println!("[PASS] criterion 3: f_measure exact on 100 instances; compose within 1e-12; reachability exact");
}

// ---------------------------------------------------------------------
// Criterion 4: curation contract at 1000-class scale (counts only).
// ---------------------------------------------------------------------

#[test]
fn criterion_4_curation_contract() {
    let counts = pareto_counts(1000, 6.0, 1280, 5);
    assert_eq!(counts[0], 1280, "head count must be exactly 1280");
    assert_eq!(counts[999], 5, "tail count must be exactly 5");
    assert!(
        counts.windows(2).all(|w| w[0] >= w[1]),
        "counts must be monotone nonincreasing"
    );
    let cats = shot_partition(&counts, 100, 20);
    let many = cats.iter().filter(|c| **c == ShotCategory::Many).count();
    let medium = cats.iter().filter(|c| **c == ShotCategory::Medium).count();
    let few = cats.iter().filter(|c| **c == ShotCategory::Few).count();
    assert!(many > 0 && medium > 0 && few > 0, "every shot bucket must be nonempty");
    println!(
        "[PASS] criterion 4: counts 1280→5 nonincreasing; shot buckets many={many} medium={medium} few={few}"
    );
}

// ---------------------------------------------------------------------
// Shared benchmark for criteria 5–7.
// ---------------------------------------------------------------------

struct SeedOutcome {
    full: EvalReport,
    plain: EvalReport,
    no_memory: EvalReport,
    full_curve: Vec<ThresholdPoint>,
    plain_curve: Vec<ThresholdPoint>,
}

fn bench_config(seed: u64) -> Config {
    cfg_from(&[
        ("num_classes", "20"),
        ("open_classes", "5"),
        ("pareto_alpha", "6"),
        ("n_max", "500"),
        ("n_min", "5"),
        ("val_per_class", "20"),
        ("test_per_class", "50"),
        ("open_per_class", "50"),
        ("input_dim", "16"),
        ("embed_dim", "32"),
        ("hidden_dims", "64,64"),
        ("batch_size", "64"),
        ("classes_per_batch", "8"),
        ("epochs", "30"),
        ("learning_rate", "0.1"),
        ("loss_reduction", "mean"),
        ("open_threshold", "0.1"),
        ("synthetic_separation", "1.0"),
        ("synthetic_noise", "1.4"),
        ("synthetic_latent_rank", "5"),
        ("seed", &seed.to_string()),
    ])
}

fn threshold_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

fn run_seed(seed: u64) -> SeedOutcome {
    let cfg = bench_config(seed);
    let source = SyntheticSource::from_config(&cfg);
    let data = pareto_longtail_split(&source, &cfg).expect("curation");

    let evaluate = |cfg: &Config| -> (EvalReport, Vec<ThresholdPoint>) {
        let result = fit(&data, cfg, &FitOptions::default()).expect("training");
        let state = result.best_state;
        let closed = score_samples(&state.params, &state.memory, cfg, &data.test_closed).unwrap();
        let open = score_samples(&state.params, &state.memory, cfg, &data.test_open).unwrap();
        let report =
            report_from_scores(&closed, &open, &data.shot_partition, cfg.open_threshold).unwrap();
        let curve = sweep_thresholds(&closed, &open, &threshold_grid()).unwrap();
        (report, curve)
    };

    let (full, full_curve) = evaluate(&cfg);

    let mut plain_cfg = cfg.clone();
    plain_cfg.model_variant = ModelVariant::Plain;
    let (plain, plain_curve) = evaluate(&plain_cfg);

    let mut nomem_cfg = cfg.clone();
    nomem_cfg.memory_enabled = false;
    let (no_memory, _) = evaluate(&nomem_cfg);

    SeedOutcome {
        full,
        plain,
        no_memory,
        full_curve,
        plain_curve,
    }
}

fn benchmark() -> &'static Vec<SeedOutcome> {
    static BENCH: OnceLock<Vec<SeedOutcome>> = OnceLock::new();
    BENCH.get_or_init(|| {
        (0..5)
            .map(|seed| {
                let o = run_seed(seed);
                println!(
                    "  seed {seed}: few-shot full/plain/no-mem = {:.3}/{:.3}/{:.3}; \
                     F full/plain = {:.3}/{:.3}; ‖squash‖ closed/open = {:.3}/{:.3}",
                    o.full.closed.few.unwrap_or(f64::NAN),
                    o.plain.closed.few.unwrap_or(f64::NAN),
                    o.no_memory.closed.few.unwrap_or(f64::NAN),
                    o.full.f_measure,
                    o.plain.f_measure,
                    o.full.mean_squashed_norm_closed.unwrap_or(f64::NAN),
                    o.full.mean_squashed_norm_open.unwrap_or(f64::NAN),
                );
                o
            })
            .collect()
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------
// Criterion 5: direction-preserving benchmark.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_direction_preserving_benchmark() {
    let outcomes = benchmark();
    let full_few = mean(outcomes.iter().map(|o| o.full.closed.few.unwrap_or(0.0)));
    let plain_few = mean(outcomes.iter().map(|o| o.plain.closed.few.unwrap_or(0.0)));
    let nomem_few = mean(outcomes.iter().map(|o| o.no_memory.closed.few.unwrap_or(0.0)));
    let full_f = mean(outcomes.iter().map(|o| o.full.f_measure));
    let plain_f = mean(outcomes.iter().map(|o| o.plain.f_measure));

    assert!(
        full_few - plain_few >= 0.05,
        "(a) few-shot gap {:.3} < 5 points (full {full_few:.3}, plain {plain_few:.3})",
        full_few - plain_few
    );
    assert!(
        full_f > plain_f,
        "(b) open-set F-measure: full {full_f:.3} must exceed plain {plain_f:.3}"
    );
    assert!(
        nomem_few < full_few,
        "(c) removing the memory feature must reduce few-shot accuracy (full {full_few:.3}, no-memory {nomem_few:.3})"
    );
    println!(
        "[PASS] criterion 5: few-shot full {full_few:.3} vs plain {plain_few:.3} (gap {:.1} pts); \
         F-measure full {full_f:.3} vs plain {plain_f:.3}; no-memory few-shot {nomem_few:.3}",
        (full_few - plain_few) * 100.0
    );
}

// ---------------------------------------------------------------------
// Criterion 6: reachability drives open-sample embeddings toward 0.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_reachability_behavior() {
    // Unit level: with the numerator held fixed, ‖v_meta‖ — and through the
    // squashing map, ‖squash(v_meta)‖ — strictly decreases as γ grows.
    let numerator = [0.8, -1.2, 0.5, 2.0];
    let mut prev = f64::INFINITY;
    let mut prev_squashed = f64::INFINITY;
    for i in 1..=50 {
        let gamma = 0.1 * i as f64;
        let scaled: Vec<f64> = numerator.iter().map(|x| x / gamma).collect();
        let n = norm(&scaled);
        assert!(n < prev, "‖v_meta‖ must strictly decrease in γ");
        let ns = norm(&squash(&scaled));
        assert!(ns < prev_squashed, "‖squash(v_meta)‖ must strictly decrease in γ");
        prev = n;
        prev_squashed = ns;
    }

    let outcomes = benchmark();
    for (seed, o) in outcomes.iter().enumerate() {
        let closed = o.full.mean_squashed_norm_closed.expect("full model records norms");
        let open = o.full.mean_squashed_norm_open.expect("full model records norms");
        assert!(
            open < closed,
            "seed {seed}: open-sample mean ‖squash(v_meta)‖ {open:.4} must be below closed {closed:.4}"
        );
    }
    let closed = mean(outcomes.iter().map(|o| o.full.mean_squashed_norm_closed.unwrap()));
    let open = mean(outcomes.iter().map(|o| o.full.mean_squashed_norm_open.unwrap()));
    println!(
        "[PASS] criterion 6: mean ‖squash(v_meta)‖ open {open:.4} < closed {closed:.4} on 5/5 seeds; ‖v_meta‖ strictly decreasing in γ"
    );
}

// ---------------------------------------------------------------------
// Criterion 7: threshold sweep sanity.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_threshold_sweep() {
    let outcomes = benchmark();
    let mut degradation_wins = 0;
    for (seed, o) in outcomes.iter().enumerate() {
        for curve in [&o.full_curve, &o.plain_curve] {
            for w in curve.windows(2) {
                assert!(
                    w[0].non_open_predictions >= w[1].non_open_predictions,
                    "seed {seed}: non-OPEN prediction count must be monotone nonincreasing"
                );
            }
        }
        // Degradation at t = how far accuracy has deteriorated below its
        // value at the first grid point (an improvement is no degradation).
        let full0 = o.full_curve[0].overall_open_accuracy;
        let plain0 = o.plain_curve[0].overall_open_accuracy;
        let ok = o.full_curve.iter().zip(&o.plain_curve).all(|(f, p)| {
            let full_deg = (full0 - f.overall_open_accuracy).max(0.0);
            let plain_deg = (plain0 - p.overall_open_accuracy).max(0.0);
            full_deg <= plain_deg
        });
        if ok {
            degradation_wins += 1;
        }
    }
    assert!(
        degradation_wins >= 3,
        "full model must degrade no faster than plain at every grid point on ≥3/5 seeds, got {degradation_wins}"
    );
    println!(
        "[PASS] criterion 7: rejection monotone on all seeds; degradation no faster than plain on {degradation_wins}/5 seeds"
    );
}

// ---------------------------------------------------------------------
// Criterion 8: byte-identical training metrics under a fixed seed.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_train_determinism() {
    let bin = env!("CARGO_BIN_EXE_oltr");
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("det");
    let run_dir_str = run_dir.to_str().unwrap();

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("spawn oltr");
        assert!(
            out.status.success(),
            "oltr {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };

    run(&[
        "curate",
        "--run-dir",
        run_dir_str,
        "--k",
        "6",
        "--open-classes",
        "2",
        "--n-max",
        "30",
        "--n-min",
        "4",
        "--val-per-class",
        "4",
        "--test-per-class",
        "8",
        "--open-per-class",
        "8",
        "--input-dim",
        "8",
        "--embed-dim",
        "8",
        "--hidden-dims",
        "16,16",
        "--seed",
        "11",
    ]);
    let train_args = [
        "train",
        "--run-dir",
        run_dir_str,
        "--epochs",
        "3",
        "--batch-size",
        "12",
        "--classes-per-batch",
        "6",
        "--loss-reduction",
        "mean",
        "--threads",
        "1",
    ];
    run(&train_args);
    let first = std::fs::read(run_dir.join("metrics.jsonl")).unwrap();
    let first_ckpt = std::fs::read(run_dir.join("last.ckpt")).unwrap();
    run(&train_args);
    let second = std::fs::read(run_dir.join("metrics.jsonl")).unwrap();
    let second_ckpt = std::fs::read(run_dir.join("last.ckpt")).unwrap();
    assert_eq!(first, second, "metrics logs must be byte-identical");
    assert_eq!(first_ckpt, second_ckpt, "checkpoints must be byte-identical");
    println!(
        "[PASS] criterion 8: two identical-seed train runs produced byte-identical metrics logs ({} bytes)",
        first.len()
    );
}
