use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::ArgMatches;
use oltr_core::checkpoint::read_checkpoint;
use oltr_core::config::{parse_flat_text, validate_config, Config, ModelVariant};
use oltr_core::data::{
    load_split, pareto_longtail_split, write_manifest, CsvSource, CuratedDataset, ExampleSource,
    ManifestHeader, SyntheticSource, MANIFEST_VERSION,
};
use oltr_core::error::Error;
use oltr_core::eval::{
    open_class_curve_csv, report_from_scores, score_samples, sweep_open_class_counts,
    sweep_thresholds, threshold_curve_csv, EvalReport, ScoredSample,
};
use oltr_core::gradcheck::{gradcheck_over_seeds, Component};
use oltr_core::model::forward_sample;
use oltr_core::training::{fit, state_from_checkpoint, FitOptions, ModelState};
use oltr_core::types::{Label, LabeledExample};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

const SPLITS: [&str; 4] = ["train", "val", "test_closed", "test_open"];

fn snapshot_path(run_dir: &Path) -> PathBuf {
    run_dir.join("config.snapshot")
}

fn manifest_path(run_dir: &Path, split: &str) -> PathBuf {
    run_dir.join("manifests").join(format!("{split}.manifest"))
}

/// Config for a curated run: snapshot plus command-line overrides.
fn load_config(run_dir: &Path, overrides: &BTreeMap<String, String>) -> anyhow::Result<Config> {
    let path = snapshot_path(run_dir);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact(format!("run directory snapshot {}", path.display())))?;
    let mut map = parse_flat_text(&text)?;
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    Ok(validate_config(&map)?)
}

fn build_source(cfg: &Config) -> anyhow::Result<Box<dyn ExampleSource>> {
    if cfg.source == "synthetic" {
        Ok(Box::new(SyntheticSource::from_config(cfg)))
    } else {
        Ok(Box::new(CsvSource::load(Path::new(&cfg.source))?))
    }
}

/// Rebuild the curated dataset from the run's manifests.
fn load_curated(
    source: &dyn ExampleSource,
    run_dir: &Path,
    cfg: &Config,
) -> anyhow::Result<CuratedDataset> {
    let train = load_split(source, &manifest_path(run_dir, "train"))?;
    let val = load_split(source, &manifest_path(run_dir, "val"))?;
    let test_closed = load_split(source, &manifest_path(run_dir, "test_closed"))?;
    let test_open = load_split(source, &manifest_path(run_dir, "test_open"))?;

    let mut class_counts = vec![0usize; cfg.num_classes];
    for ex in &train {
        if let Label::Known(y) = ex.label {
            if y < class_counts.len() {
                class_counts[y] += 1;
            }
        }
    }
    let shot_partition =
        oltr_core::data::shot_partition(&class_counts, cfg.many_shot_min, cfg.few_shot_max);
    Ok(CuratedDataset {
        train,
        val,
        test_closed,
        test_open,
        class_counts,
        shot_partition,
        closed_source_classes: Vec::new(),
        open_source_classes: Vec::new(),
    })
}

fn write_split_manifests(run_dir: &Path, cfg: &Config, data: &CuratedDataset) -> anyhow::Result<()> {
    std::fs::create_dir_all(run_dir.join("manifests"))?;
    for split in SPLITS {
        let rows: Vec<&LabeledExample> = match split {
            "train" => data.train.iter().collect(),
            "val" => data.val.iter().collect(),
            "test_closed" => data.test_closed.iter().collect(),
            _ => data.test_open.iter().collect(),
        };
        let header = ManifestHeader {
            split: split.to_string(),
            k: cfg.num_classes,
            alpha: cfg.pareto_alpha,
            n_max: cfg.n_max,
            n_min: cfg.n_min,
            seed: cfg.seed,
            version: MANIFEST_VERSION,
        };
        write_manifest(&manifest_path(run_dir, split), &header, &rows)?;
    }
    Ok(())
}

fn curate_into(run_dir: &Path, cfg: &Config) -> anyhow::Result<CuratedDataset> {
    let snapshot = snapshot_path(run_dir);
    if snapshot.exists() {
        return Err(Error::Config(format!(
            "run directory {} is already curated (config snapshot exists)",
            run_dir.display()
        ))
        .into());
    }
    let source = build_source(cfg)?;
    if source.num_classes() > 0 {
        let (_, probe) = source.fetch(0, 0);
        if probe.len() != cfg.input_len() {
            return Err(Error::Config(format!(
                "input_dim: source provides vectors of length {}, config expects {}",
                probe.len(),
                cfg.input_len()
            ))
            .into());
        }
    }
    let data = pareto_longtail_split(source.as_ref(), cfg)?;
    std::fs::create_dir_all(run_dir)?;
    write_split_manifests(run_dir, cfg, &data)?;
    std::fs::write(&snapshot, cfg.to_flat_text())?;
    Ok(data)
}

pub fn curate(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    _matches: &ArgMatches,
) -> anyhow::Result<ExitCode> {
    let cfg = validate_config(overrides)?;
    let data = curate_into(run_dir, &cfg)?;
    println!(
        "curated {}: {} train / {} val / {} closed test / {} open test (counts {}..{})",
        run_dir.display(),
        data.train.len(),
        data.val.len(),
        data.test_closed.len(),
        data.test_open.len(),
        data.class_counts.first().copied().unwrap_or(0),
        data.class_counts.last().copied().unwrap_or(0),
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    matches: &ArgMatches,
) -> anyhow::Result<ExitCode> {
    let cfg = load_config(run_dir, overrides)?;
    let source = build_source(&cfg)?;
    let data = load_curated(source.as_ref(), run_dir, &cfg)?;
    let out_dir = match matches.get_one::<String>("out_subdir") {
        Some(sub) => run_dir.join(sub),
        None => run_dir.to_path_buf(),
    };
    std::fs::create_dir_all(&out_dir)?;
    let result = fit(
        &data,
        &cfg,
        &FitOptions {
            run_dir: Some(&out_dir),
            resume: matches.get_flag("resume"),
        },
    )?;
    println!(
        "trained {} epochs ({} variant); best val accuracy {:.4} at epoch {}",
        result.state.epoch,
        cfg.model_variant.as_str(),
        result.best_val_acc,
        result.best_epoch,
    );
    Ok(ExitCode::SUCCESS)
}

/// Load a checkpoint and rebuild its training state. The model architecture
/// comes from the checkpoint's own config snapshot; `overrides` adjust
/// evaluation-time knobs (threshold, grids).
fn load_state(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    matches: &ArgMatches,
) -> anyhow::Result<(Config, ModelState)> {
    let path = match matches.get_one::<String>("checkpoint") {
        Some(p) => PathBuf::from(p),
        None => run_dir.join("best.ckpt"),
    };
    let ckpt = read_checkpoint(&path)?;
    let mut map = parse_flat_text(&ckpt.meta.config_text)?;
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    let cfg = validate_config(&map)?;
    let state = state_from_checkpoint(&ckpt, &cfg)?;
    Ok((cfg, state))
}

fn default_threshold_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

fn full_report(
    cfg: &Config,
    state: &ModelState,
    data: &CuratedDataset,
) -> anyhow::Result<(EvalReport, Vec<ScoredSample>, Vec<ScoredSample>)> {
    let closed = score_samples(&state.params, &state.memory, cfg, &data.test_closed)?;
    let open = score_samples(&state.params, &state.memory, cfg, &data.test_open)?;
    let mut report = report_from_scores(&closed, &open, &data.shot_partition, cfg.open_threshold)?;
    report.threshold_curve = sweep_thresholds(&closed, &open, &default_threshold_grid())?;
    let open_grid: Vec<usize> = (0..=cfg.open_classes).collect();
    report.open_class_curve =
        sweep_open_class_counts(&closed, &open, cfg.open_per_class, &open_grid, cfg.open_threshold)?;
    Ok((report, closed, open))
}

fn write_report_files(dir: &Path, name: &str, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(
        dir.join(format!("{name}_threshold_curve.csv")),
        threshold_curve_csv(&report.threshold_curve),
    )?;
    std::fs::write(
        dir.join(format!("{name}_open_class_curve.csv")),
        open_class_curve_csv(&report.open_class_curve),
    )?;
    Ok(())
}

fn summarize(report: &EvalReport) -> String {
    let pct = |x: Option<f64>| match x {
        Some(v) => format!("{:.3}", v),
        None => "-".into(),
    };
    format!(
        "closed overall {:.3} (many {} / medium {} / few {}); open overall {:.3}; F-measure {:.3}",
        report.closed.overall,
        pct(report.closed.many),
        pct(report.closed.medium),
        pct(report.closed.few),
        report.open_overall,
        report.f_measure,
    )
}

pub fn eval(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    matches: &ArgMatches,
) -> anyhow::Result<ExitCode> {
    let (cfg, state) = load_state(run_dir, overrides, matches)?;
    let source = build_source(&cfg)?;
    let data = load_curated(source.as_ref(), run_dir, &cfg)?;
    let (report, _, _) = full_report(&cfg, &state, &data)?;
    write_report_files(&run_dir.join("reports"), "eval", &report)?;
    println!("{}", summarize(&report));
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct AblationRow {
    variant: String,
    closed_overall: f64,
    open_overall: f64,
    open_many: Option<f64>,
    open_medium: Option<f64>,
    open_few: Option<f64>,
    f_measure: f64,
}

pub fn ablate(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    matches: &ArgMatches,
) -> anyhow::Result<ExitCode> {
    let base = load_config(run_dir, overrides)?;
    let removals: Vec<String> = matches
        .get_one::<String>("flags")
        .map(|s| s.split(',').map(|f| f.trim().to_string()).collect())
        .unwrap_or_else(|| {
            vec![
                "memory_feature".into(),
                "concept_selector".into(),
                "calibration".into(),
                "attention".into(),
            ]
        });

    let mut variants: Vec<(String, Config)> = Vec::new();
    variants.push(("full".into(), base.clone()));
    for flag in &removals {
        let mut cfg = base.clone();
        match flag.as_str() {
            "memory_feature" => cfg.memory_enabled = false,
            "concept_selector" => cfg.selector_enabled = false,
            "calibration" => cfg.calibration_enabled = false,
            "attention" => cfg.attention_enabled = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation flag {other:?} (expected memory_feature, \
                     concept_selector, calibration, attention)"
                ))
                .into())
            }
        }
        variants.push((format!("no_{flag}"), cfg));
    }
    {
        let mut cfg = base.clone();
        cfg.model_variant = ModelVariant::Plain;
        variants.push(("plain".into(), cfg));
    }

    let source = build_source(&base)?;
    let data = load_curated(source.as_ref(), run_dir, &base)?;
    let mut rows = Vec::new();
    for (name, cfg) in &variants {
        let sub = run_dir.join("ablate").join(name);
        std::fs::create_dir_all(&sub)?;
        fit(
            &data,
            cfg,
            &FitOptions {
                run_dir: Some(&sub),
                resume: false,
            },
        )?;
        let ckpt = read_checkpoint(&sub.join("best.ckpt"))?;
        let state = state_from_checkpoint(&ckpt, cfg)?;
        let (report, _, _) = full_report(cfg, &state, &data)?;
        println!("{name:<22} {}", summarize(&report));
        rows.push(AblationRow {
            variant: name.clone(),
            closed_overall: report.closed.overall,
            open_overall: report.open_overall,
            open_many: report.open.many,
            open_medium: report.open.medium,
            open_few: report.open.few,
            f_measure: report.f_measure,
        });
    }

    let reports = run_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    std::fs::write(
        reports.join("ablation.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    let mut csv =
        String::from("variant,closed_overall,open_overall,open_many,open_medium,open_few,f_measure\n");
    for row in &rows {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.variant,
            row.closed_overall,
            row.open_overall,
            opt(row.open_many),
            opt(row.open_medium),
            opt(row.open_few),
            row.f_measure
        );
    }
    std::fs::write(reports.join("ablation.csv"), csv)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_float_grid(raw: &str) -> anyhow::Result<Vec<f64>> {
    let parse = |s: &str| -> anyhow::Result<f64> {
        s.trim()
            .parse::<f64>()
            .with_context(|| format!("bad grid value {s:?}"))
    };
    if let Some((start, rest)) = raw.split_once(':') {
        let (end, step) = rest
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("grid range must be start:end:step, got {raw:?}")))?;
        let (start, end, step) = (parse(start)?, parse(end)?, parse(step)?);
        if step <= 0.0 || end < start {
            return Err(Error::Config(format!("empty grid range {raw:?}")).into());
        }
        let mut grid = Vec::new();
        let mut i = 0;
        loop {
            let x = start + step * i as f64;
            if x > end + 1e-12 {
                break;
            }
            grid.push(x);
            i += 1;
        }
        Ok(grid)
    } else {
        raw.split(',').map(parse).collect()
    }
}

#[derive(serde::Serialize)]
struct AlphaPoint {
    pareto_alpha: f64,
    closed_overall: f64,
    open_overall: f64,
    f_measure: f64,
}

pub fn sweep(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    matches: &ArgMatches,
) -> anyhow::Result<ExitCode> {
    let axis = matches.get_one::<String>("axis").expect("required").as_str();
    let grid_raw = matches.get_one::<String>("grid").expect("required");
    let reports = run_dir.join("reports");
    std::fs::create_dir_all(&reports)?;

    match axis {
        "threshold" => {
            let grid = parse_float_grid(grid_raw)?;
            let (cfg, state) = load_state(run_dir, overrides, matches)?;
            let source = build_source(&cfg)?;
            let data = load_curated(source.as_ref(), run_dir, &cfg)?;
            let closed = score_samples(&state.params, &state.memory, &cfg, &data.test_closed)?;
            let open = score_samples(&state.params, &state.memory, &cfg, &data.test_open)?;
            let curve = sweep_thresholds(&closed, &open, &grid)?;
            std::fs::write(
                reports.join("sweep_threshold.json"),
                serde_json::to_string_pretty(&curve)?,
            )?;
            std::fs::write(reports.join("sweep_threshold.csv"), threshold_curve_csv(&curve))?;
            for p in &curve {
                println!(
                    "threshold {:.3}: open-setting accuracy {:.4}, F {:.4}, kept {}",
                    p.threshold, p.overall_open_accuracy, p.f_measure, p.non_open_predictions
                );
            }
        }
        "open-classes" => {
            let grid: Vec<usize> = parse_float_grid(grid_raw)?
                .into_iter()
                .map(|x| x.round() as usize)
                .collect();
            let (cfg, state) = load_state(run_dir, overrides, matches)?;
            let source = build_source(&cfg)?;
            let data = load_curated(source.as_ref(), run_dir, &cfg)?;
            let closed = score_samples(&state.params, &state.memory, &cfg, &data.test_closed)?;
            let open = score_samples(&state.params, &state.memory, &cfg, &data.test_open)?;
            let curve =
                sweep_open_class_counts(&closed, &open, cfg.open_per_class, &grid, cfg.open_threshold)?;
            std::fs::write(
                reports.join("sweep_open_classes.json"),
                serde_json::to_string_pretty(&curve)?,
            )?;
            std::fs::write(reports.join("sweep_open_classes.csv"), open_class_curve_csv(&curve))?;
            for p in &curve {
                println!(
                    "open classes {}: open-setting accuracy {:.4}, F {:.4}",
                    p.open_classes, p.overall_open_accuracy, p.f_measure
                );
            }
        }
        "pareto-alpha" => {
            // One curated dataset and trained checkpoint per α.
            let grid = parse_float_grid(grid_raw)?;
            if grid.is_empty() {
                return Err(Error::EmptyGrid.into());
            }
            let base = load_config(run_dir, overrides)?;
            let mut points = Vec::new();
            for &alpha in &grid {
                let mut cfg = base.clone();
                cfg.pareto_alpha = alpha;
                let sub = run_dir.join("sweep").join(format!("alpha_{alpha}"));
                if !snapshot_path(&sub).exists() {
                    curate_into(&sub, &cfg)?;
                }
                let source = build_source(&cfg)?;
                let data = load_curated(source.as_ref(), &sub, &cfg)?;
                fit(
                    &data,
                    &cfg,
                    &FitOptions {
                        run_dir: Some(&sub),
                        resume: false,
                    },
                )?;
                let ckpt = read_checkpoint(&sub.join("best.ckpt"))?;
                let state = state_from_checkpoint(&ckpt, &cfg)?;
                let (report, _, _) = full_report(&cfg, &state, &data)?;
                println!("alpha {alpha}: {}", summarize(&report));
                points.push(AlphaPoint {
                    pareto_alpha: alpha,
                    closed_overall: report.closed.overall,
                    open_overall: report.open_overall,
                    f_measure: report.f_measure,
                });
            }
            std::fs::write(
                reports.join("sweep_alpha.json"),
                serde_json::to_string_pretty(&points)?,
            )?;
            let mut csv = String::from("pareto_alpha,closed_overall,open_overall,f_measure\n");
            for p in &points {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    p.pareto_alpha, p.closed_overall, p.open_overall, p.f_measure
                );
            }
            std::fs::write(reports.join("sweep_alpha.csv"), csv)?;
        }
        other => unreachable!("clap validates the axis, got {other}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn dump_embeddings(
    run_dir: &Path,
    overrides: &BTreeMap<String, String>,
    matches: &ArgMatches,
) -> anyhow::Result<ExitCode> {
    let (cfg, state) = load_state(run_dir, overrides, matches)?;
    if cfg.model_variant != ModelVariant::Full {
        return Err(Error::Config(
            "dump-embeddings requires the full variant (the plain baseline has no meta-embedding)"
                .into(),
        )
        .into());
    }
    let split = matches.get_one::<String>("split").expect("defaulted").as_str();
    let source = build_source(&cfg)?;
    let examples = load_split(source.as_ref(), &manifest_path(run_dir, split))?;

    let mut csv = String::from("id,label,gamma");
    for d in 0..cfg.embed_dim {
        let _ = write!(csv, ",v{d}");
    }
    csv.push('\n');
    for ex in &examples {
        let fwd = forward_sample(&state.params, Some(&state.memory), &cfg, &ex.input)?;
        let (meta, _) = fwd.meta.as_ref().expect("full variant embeds");
        let label = match ex.label {
            Label::Known(y) => y.to_string(),
            Label::Open => "open".into(),
        };
        let _ = write!(csv, "{},{},{}", ex.id, label, meta.gamma);
        for v in &meta.vector {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let reports = run_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    let out = reports.join(format!("embeddings_{split}.csv"));
    std::fs::write(&out, csv)?;
    println!("wrote {} rows to {}", examples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck_cmd(matches: &ArgMatches) -> anyhow::Result<ExitCode> {
    let which = matches.get_one::<String>("component").expect("defaulted");
    let base: u64 = matches
        .get_one::<String>("seed")
        .expect("defaulted")
        .parse()
        .map_err(|_| Error::Config("seed: expected an integer".into()))?;
    let count: u64 = matches
        .get_one::<String>("seeds")
        .expect("defaulted")
        .parse()
        .map_err(|_| Error::Config("seeds: expected an integer".into()))?;

    let components: Vec<Component> = if which == "all" {
        Component::ALL.to_vec()
    } else {
        vec![Component::parse(which).ok_or_else(|| {
            Error::Config(format!(
                "unknown component {which:?}; expected one of {} or all",
                Component::ALL
                    .iter()
                    .map(|c| c.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?]
    };

    let mut worst_overall: f64 = 0.0;
    for component in components {
        let worst = gradcheck_over_seeds(component, base..base + count);
        let status = if worst < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<22} max relative error {:.3e}  [{}]", component.name(), worst, status);
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed: worst relative error {worst_overall:.3e} >= {GRADCHECK_TOLERANCE:e}"
        ))
        .into())
    }
}
