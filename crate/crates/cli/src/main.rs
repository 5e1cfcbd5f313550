mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::Settings;

/// MOS prediction: dataset statistics, batch planning, training, prediction and evaluation.
///
/// Any config key can be overridden as `--<key> <value>`; run `mospred keys` to list them.
#[derive(Debug, Parser)]
#[command(name = "mospred", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// key = value config file applied before overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-key overrides: --<key> <value> or --<key>=<value>.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// MOS histogram, class weights and rating scatter of a manifest.
    Stats(Common),
    /// Writes the mini-batch plan of a manifest as NDJSON.
    PlanBatches(Common),
    /// Trains a regression model, or a classifier from a regression checkpoint.
    Train(Common),
    /// Continues training a regression checkpoint on another domain.
    Finetune(Common),
    /// Runs checkpoints over a manifest and post-processes the outputs.
    Predict(Common),
    /// Scores a predictions CSV against a labeled manifest.
    Evaluate(Common),
    /// Lists every config key with its default.
    Keys,
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        s.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        s.set("out", &out.to_string_lossy())?;
    }
    let threads: usize = s.get("threads")?;
    if threads > 0 {
        // fails only if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(s)
}

type Handler = fn(&Settings, &std::path::Path) -> Result<()>;

fn run(cli: Cli) -> Result<()> {
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Stats(c) => (c, commands::stats),
        Command::PlanBatches(c) => (c, commands::plan_batches),
        Command::Train(c) => (c, commands::train),
        Command::Finetune(c) => (c, commands::finetune_cmd),
        Command::Predict(c) => (c, commands::predict_cmd),
        Command::Evaluate(c) => (c, commands::evaluate_cmd),
        Command::Keys => {
            for (k, v, help) in config::KEYS {
                println!("{k:<26} {v:<12} {help}");
            }
            return Ok(());
        }
    };
    let s = settings(common)?;
    let out = commands::prepare_out(&s)?;
    cmd(&s, &out)
}

fn kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<mospred::Error>().map(mospred::Error::kind))
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("config")
}

/// `error kind=<tag> message=<json string>` on one line.
fn report(kind: &str, message: &str) {
    eprintln!("error kind={kind} message={}", serde_json::Value::String(message.to_string()));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            report("usage", text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
