//! `csmri` command-line workflow: dataset generation, the two training
//! stages, the joint ablation, the segmenter, reconstruction, evaluation and
//! reporting.
//!
//! Every setting is a configuration key. Values come from built-in
//! defaults, then from `--config FILE` (`key = value` lines, `#` comments),
//! then from flags named after the keys (`batch_size` is `--batch-size`).

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{Key, Settings};

/// Log verbosity, read by `env_logger` (`error` .. `trace`; default `info`).
pub const LOG_ENV: &str = "CSMRI_LOG";

const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate the synthetic phantom dataset"),
    ("train-recon", "stage 1: train the reconstruction cascade"),
    ("train-refine", "stage 2: train the gated refiner against a discriminator on a frozen cascade"),
    ("train-seg", "train the segmentation network used for SIS"),
    ("ablate-joint", "train cascade, refiner and discriminator jointly from scratch"),
    ("recon", "write reconstructions of the test split"),
    ("eval", "score methods on the test split"),
    ("report", "tables and plots comparing eval outputs"),
];

fn keys_of(name: &str) -> Vec<Key> {
    match name {
        "gen-data" => config::GEN_DATA.to_vec(),
        "train-refine" => [config::TRAIN, config::TRAIN_REFINE_EXTRA].concat(),
        "train-recon" | "train-seg" | "ablate-joint" => config::TRAIN.to_vec(),
        "recon" => config::RECON.to_vec(),
        "eval" => config::EVAL.to_vec(),
        _ => config::REPORT.to_vec(),
    }
}

fn is_training(name: &str) -> bool {
    matches!(name, "train-recon" | "train-refine" | "train-seg" | "ablate-joint")
}

fn cli() -> Command {
    let mut app = Command::new("csmri")
        .about("Two-stage compressed-sensing MRI reconstruction on synthetic phantoms")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"));
        if name == "gen-data" {
            sub = sub.arg(
                Arg::new("spec")
                    .long("spec")
                    .value_name("FILE")
                    .conflicts_with("config")
                    .help("phantom specification file (same grammar as --config)"),
            );
        }
        if is_training(name) {
            sub = sub.arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue from <out>/last"));
        }
        for k in keys_of(name) {
            let mut arg = Arg::new(k.name).long(k.name.replace('_', "-")).help(k.help).value_name("VALUE");
            if k.multi {
                arg = arg.num_args(1..).action(ArgAction::Append);
            }
            sub = sub.arg(arg);
        }
        app = app.subcommand(sub);
    }
    app
}

fn settings(name: &str, m: &ArgMatches) -> Result<Settings> {
    let keys = keys_of(name);
    let mut s = Settings::new(name, &keys);
    for file in ["config", "spec"] {
        if let Some(path) = m.try_get_one::<String>(file).ok().flatten() {
            s.merge_file(&PathBuf::from(path))?;
        }
    }
    for k in &keys {
        if let Some(vals) = m.get_many::<String>(k.name) {
            s.set(k.name, vals.cloned().collect::<Vec<_>>().join(","));
        }
    }
    Ok(s)
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let s = settings(name, sub)?;
    let resume = is_training(name) && sub.get_flag("resume");
    match name {
        "gen-data" => commands::gen_data(s),
        "train-recon" => commands::train(csmri::training::Stage::Recon, s, resume),
        "train-refine" => commands::train(csmri::training::Stage::Refine, s, resume),
        "train-seg" => commands::train(csmri::training::Stage::Segment, s, resume),
        "ablate-joint" => commands::train(csmri::training::Stage::Joint, s, resume),
        "recon" => commands::recon(s),
        "eval" => commands::eval(s),
        _ => commands::report(s),
    }
}

/// Runs one invocation and returns the process exit code. Errors are
/// reported as a single line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}
