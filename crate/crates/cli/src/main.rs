//! `oltr` — curation, training, ablation, evaluation, sweeps, embedding
//! dumps and gradient checks over one run directory.
//!
//! Exit codes: 0 success, 2 usage error, 3 config error, 4 missing
//! artifact, 5 numeric failure.

mod commands;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};
use oltr_core::config::DEFAULTS;

const RUN_ROOT_ENV: &str = "OLTR_RUN_ROOT";

fn config_flags(mut cmd: Command) -> Command {
    for (key, default) in DEFAULTS {
        let mut arg = Arg::new(*key)
            .long(key.replace('_', "-"))
            .value_name("VALUE")
            .allow_hyphen_values(true)
            .help(format!("config key {key} (default {default})"));
        if *key == "num_classes" {
            arg = arg.visible_alias("k");
        }
        if *key == "pareto_alpha" {
            arg = arg.visible_alias("alpha");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn run_dir_flag(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("run_dir")
            .long("run-dir")
            .value_name("DIR")
            .required(true)
            .help(format!(
                "run directory (relative paths resolve against ${RUN_ROOT_ENV})"
            )),
    )
    .arg(
        Arg::new("threads")
            .long("threads")
            .value_name("N")
            .help("worker threads for data-parallel sections (0 = auto)"),
    )
}

fn cli() -> Command {
    Command::new("oltr")
        .about("Open long-tailed recognition: curation, training and open-set evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_flags(run_dir_flag(Command::new("curate").about(
            "Build the long-tail train/val/test/open manifests and the config snapshot",
        ))))
        .subcommand(config_flags(run_dir_flag(
            Command::new("train")
                .about("Train a model over the curated run; writes metrics.jsonl and checkpoints")
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("resume from last.ckpt"),
                )
                .arg(
                    Arg::new("out_subdir")
                        .long("out-subdir")
                        .value_name("NAME")
                        .help("write training outputs under run-dir/NAME instead of the run root"),
                ),
        )))
        .subcommand(config_flags(run_dir_flag(
            Command::new("eval")
                .about("Evaluate a checkpoint; writes the report JSON and curve CSVs")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .help("checkpoint path (default run-dir/best.ckpt)"),
                ),
        )))
        .subcommand(config_flags(run_dir_flag(
            Command::new("ablate")
                .about("Train and evaluate the component-removal grid plus full and plain models")
                .arg(
                    Arg::new("flags")
                        .long("flags")
                        .value_name("LIST")
                        .help(
                            "comma list of components to remove one at a time \
                             (default memory_feature,concept_selector,calibration,attention)",
                        ),
                ),
        )))
        .subcommand(config_flags(run_dir_flag(
            Command::new("sweep")
                .about("Sweep the open threshold, the open-class count, or the tail shape")
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .value_name("AXIS")
                        .required(true)
                        .value_parser(["threshold", "open-classes", "pareto-alpha"]),
                )
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .value_name("LIST|a:b:step")
                        .required(true)
                        .help("grid points, e.g. 0.05:0.5:0.05 or 1,2,4"),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .help("checkpoint for threshold/open-classes axes (default best.ckpt)"),
                ),
        )))
        .subcommand(config_flags(run_dir_flag(
            Command::new("dump-embeddings")
                .about("Write per-sample meta-embeddings (id, label, gamma, vector) as CSV")
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("SPLIT")
                        .default_value("test_closed")
                        .value_parser(["train", "val", "test_closed", "test_open"]),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .help("checkpoint path (default run-dir/best.ckpt)"),
                ),
        )))
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic gradients against central finite differences")
                .arg(
                    Arg::new("component")
                        .long("component")
                        .value_name("NAME")
                        .default_value("all")
                        .help("one component name or 'all'"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .default_value("0")
                        .help("base seed"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("N")
                        .default_value("10")
                        .help("number of seeds per component"),
                ),
        )
}

/// Values passed explicitly on the command line, keyed by config name.
fn overrides(matches: &clap::ArgMatches) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for (key, _) in DEFAULTS {
        if let Some(value) = matches.get_one::<String>(key) {
            map.insert((*key).to_string(), value.clone());
        }
    }
    map
}

fn resolve_run_dir(matches: &clap::ArgMatches) -> PathBuf {
    let raw = PathBuf::from(matches.get_one::<String>("run_dir").expect("required"));
    if raw.is_relative() {
        if let Ok(root) = std::env::var(RUN_ROOT_ENV) {
            return PathBuf::from(root).join(raw);
        }
    }
    raw
}

fn init_threads(matches: &clap::ArgMatches) {
    #[cfg(feature = "parallel")]
    if let Some(n) = matches.get_one::<String>("threads") {
        if let Ok(n) = n.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = matches;
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<oltr_core::Error>() {
        Some(oltr_core::Error::Config(_)) => 3,
        Some(oltr_core::Error::MissingArtifact(_)) => 4,
        Some(oltr_core::Error::NonFinite(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("curate", m)) => {
            init_threads(m);
            commands::curate(&resolve_run_dir(m), &overrides(m), m)
        }
        Some(("train", m)) => {
            init_threads(m);
            commands::train(&resolve_run_dir(m), &overrides(m), m)
        }
        Some(("eval", m)) => {
            init_threads(m);
            commands::eval(&resolve_run_dir(m), &overrides(m), m)
        }
        Some(("ablate", m)) => {
            init_threads(m);
            commands::ablate(&resolve_run_dir(m), &overrides(m), m)
        }
        Some(("sweep", m)) => {
            init_threads(m);
            commands::sweep(&resolve_run_dir(m), &overrides(m), m)
        }
        Some(("dump-embeddings", m)) => {
            init_threads(m);
            commands::dump_embeddings(&resolve_run_dir(m), &overrides(m), m)
        }
        Some(("gradcheck", m)) => commands::gradcheck_cmd(m),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
