mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind as ClapKind;
use clap::{Arg, ArgAction, ArgMatches, Command};
use rcgrl::ErrorKind;

use config::{path_flag, section_flags, ConfigError};

fn with_sections(mut cmd: Command, sections: &[&str]) -> Command {
    cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help("JSON config file; flags override its values")
                .action(ArgAction::Set),
        )
        .arg(
            Arg::new("run-dir")
                .long("run-dir")
                .value_name("PATH")
                .help("Output directory (default: $RCGRL_RUNS_DIR or ./runs, one subdirectory per run)")
                .action(ArgAction::Set),
        );
    let mut footer = Vec::new();
    for section in sections {
        let (args, file_only) = section_flags(section);
        cmd = cmd.args(args);
        footer.extend(file_only);
    }
    if !footer.is_empty() {
        cmd = cmd.after_help(format!("Config-file-only keys:\n{}", footer.join("\n")));
    }
    cmd
}

fn cli() -> Command {
    Command::new("rcgrl")
        .about("Confounder-robust graph classification with generated edge weights")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_sections(Command::new("generate").about("Generate a synthetic motif dataset"), &["generate"])
                .arg(path_flag("out", "Dataset output path (default: <run dir>/dataset.jsonl)").id("out")),
        )
        .subcommand(
            with_sections(Command::new("train").about("Train a model and write a checkpoint"), &["train"])
                .arg(path_flag("data", "Dataset file")),
        )
        .subcommand(
            with_sections(Command::new("eval").about("Evaluate a checkpoint on one split"), &["analysis"])
                .arg(path_flag("data", "Dataset file"))
                .arg(path_flag("checkpoint", "Checkpoint file")),
        )
        .subcommand(
            with_sections(
                Command::new("analyze").about("Confounder ratios and greedy pruning for a checkpoint"),
                &["analysis"],
            )
            .arg(path_flag("data", "Dataset file"))
            .arg(path_flag("checkpoint", "Checkpoint file")),
        )
        .subcommand(
            with_sections(
                Command::new("sweep-u").about("Train one model per removal position"),
                &["train", "analysis"],
            )
            .arg(path_flag("data", "Dataset file")),
        )
        .subcommand(
            with_sections(
                Command::new("compare").about("Mean and std of test accuracy per mode over seeds"),
                &["train", "analysis"],
            )
            .arg(path_flag("data", "Dataset file")),
        )
        .subcommand(
            Command::new("plot")
                .about("Render a sweep CSV as an SVG line chart")
                .arg(Arg::new("input").long("input").value_name("PATH").required(true).help("sweep.csv"))
                .arg(Arg::new("out").long("out").value_name("PATH").help("Output SVG (default: input with .svg)")),
        )
}

fn dispatch(matches: &ArgMatches) -> anyhow::Result<()> {
    match matches.subcommand() {
        Some(("generate", m)) => commands::generate_cmd(m),
        Some(("train", m)) => commands::train_cmd(m),
        Some(("eval", m)) => commands::eval_cmd(m),
        Some(("analyze", m)) => commands::analyze_cmd(m),
        Some(("sweep-u", m)) => commands::sweep_cmd(m),
        Some(("compare", m)) => commands::compare_cmd(m),
        Some(("plot", m)) => commands::plot_cmd(m),
        _ => unreachable!("subcommand is required"),
    }
}

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return (2, "config");
        }
        if let Some(e) = cause.downcast_ref::<rcgrl::Error>() {
            return match e.kind() {
                ErrorKind::Config => (2, "config"),
                ErrorKind::Data => (3, "data"),
                ErrorKind::Numeric => (4, "numeric"),
            };
        }
    }
    (3, "data")
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": kind, "code": code, "message": message.trim() } });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(2, "config", &e.to_string()),
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            fail(code, kind, &format!("{e:#}"))
        }
    }
}
