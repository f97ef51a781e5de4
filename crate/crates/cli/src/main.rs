//! `delora` command line: train adapters on a synthetic task, sweep learning
//! rates, verify gradients and update ranks, report column norms, and merge
//! checkpoints.
//!
//! Exit codes: 0 success, 1 config/usage error, 2 training divergence,
//! 3 gradient-check failure, 4 rank-bound violation.

mod commands;
mod config;

use commands::Failure;

const USAGE: &str = "usage: delora <train|sweep|gradcheck|rankcheck|norms|merge> \
[--config PATH] [--seed N] [--out DIR] [--tolerance X]";

fn main() {
    std::process::exit(run(std::env::args().skip(1).collect()));
}

fn run(args: Vec<String>) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("delora: {}", f.message);
            f.code
        }
    }
}

struct Cli {
    subcommand: String,
    config_path: Option<String>,
    seed: Option<u64>,
    out: Option<String>,
    tolerance: Option<f64>,
}

fn parse_args(args: Vec<String>) -> Result<Cli, Failure> {
    let mut it = args.into_iter();
    let subcommand = it.next().ok_or_else(|| usage("missing subcommand"))?;
    let mut cli = Cli {
        subcommand,
        config_path: None,
        seed: None,
        out: None,
        tolerance: None,
    };
    while let Some(flag) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .ok_or_else(|| usage(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => cli.config_path = Some(value("--config")?),
            "--seed" => {
                let v = value("--seed")?;
                cli.seed = Some(
                    v.parse()
                        .map_err(|_| usage(format!("--seed: not an integer: {v}")))?,
                );
            }
            "--out" => cli.out = Some(value("--out")?),
            "--tolerance" => {
                let v = value("--tolerance")?;
                cli.tolerance = Some(
                    v.parse()
                        .map_err(|_| usage(format!("--tolerance: not a number: {v}")))?,
                );
            }
            other => return Err(usage(format!("unknown argument {other:?}"))),
        }
    }
    Ok(cli)
}

fn usage(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("{message}\n{USAGE}"),
    }
}

fn dispatch(args: Vec<String>) -> Result<(), Failure> {
    let cli = parse_args(args)?;

    let mut raw = match &cli.config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure {
                code: 1,
                message: format!("--config {path}: {e}"),
            })?;
            config::parse(&text).map_err(|m| Failure { code: 1, message: m })?
        }
        None => config::RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        raw.seed = seed;
    }
    if let Some(out) = &cli.out {
        raw.out_dir = out.clone();
    }
    let cfg = config::validate(raw).map_err(|m| Failure { code: 1, message: m })?;

    match cli.subcommand.as_str() {
        "train" => commands::cmd_train(&cfg),
        "sweep" => commands::cmd_sweep(&cfg),
        "gradcheck" => commands::cmd_gradcheck(&cfg, cli.tolerance),
        "rankcheck" => commands::cmd_rankcheck(&cfg),
        "norms" => commands::cmd_norms(&cfg),
        "merge" => commands::cmd_merge(&cfg),
        other => Err(usage(format!("unknown subcommand {other:?}"))),
    }
}
