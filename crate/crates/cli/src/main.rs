//! Command-line front end.
//!
//! Pipeline subcommands (`preprocess`, `train`, `grid`, `folds`, `synth`,
//! `run`) build an experiment config from an optional `--config` file plus
//! any number of `--key=value` overrides with dotted keys, e.g.
//! `--train.epochs=3 --model.dt_em_size=8`. Override values are parsed as
//! JSON when possible and taken as strings otherwise.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use dwellrec::dataset::{build_sessions, parse_clicks, write_clicks, ParseMode, Session, Vocab};
use dwellrec::evaluation::{compare_reports, evaluate, EvalReport};
use dwellrec::experiments::{run_pipeline, ExperimentConfig, Pipeline};
use dwellrec::model::load_checkpoint;
use dwellrec::preprocess::{day_to_date, dwell_histogram, read_examples, write_histogram};
use dwellrec::{Error, Result};
use serde_json::{json, Map, Value};

#[derive(Parser, Debug)]
#[command(
    name = "dwellrec",
    version,
    about = "Session-based next-item recommendation with dwell time"
)]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for model initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a click file and report session and click counts.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        lenient: bool,
        /// Write the parsed clicks back out, grouped by session.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter, split and write vocabulary and example files.
    Preprocess,
    /// Train one model and evaluate it after every epoch.
    Train,
    /// Rank a checkpoint's predictions on an example file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        /// Vocabulary the examples were indexed with; checked against the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// EvalReport CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// DT-RNN grid search with the item path held fixed.
    Grid,
    /// Fold-based model selection with held-out test scores.
    Folds,
    /// Write a synthetic click log.
    Synth,
    /// Dwell-bucket histogram of a click file.
    Histogram {
        input: PathBuf,
        #[arg(long)]
        lenient: bool,
        #[arg(long, default_value_t = 3600)]
        cap: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wilcoxon signed-rank test between two EvalReport files.
    Compare { a: PathBuf, b: PathBuf },
    /// Run the pipeline named in the config.
    Run,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match dispatch(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            report_error("usage", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
}

fn dispatch(argv: Vec<String>) -> std::result::Result<(), Failure> {
    let (argv, overrides) = split_overrides(argv);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Failure::Usage(e.to_string().trim().to_string())),
    };
    let pipeline = match cli.command {
        Command::Preprocess => Some(Pipeline::Preprocess),
        Command::Train => Some(Pipeline::Train),
        Command::Grid => Some(Pipeline::Grid),
        Command::Folds => Some(Pipeline::Folds),
        Command::Synth => Some(Pipeline::Synth),
        Command::Run => None,
        _ => {
            if let Some((key, _)) = overrides.first() {
                return Err(Failure::Usage(format!(
                    "unexpected argument '--{key}': overrides apply only to pipeline subcommands"
                )));
            }
            return Ok(run_tool(cli.command)?);
        }
    };
    if matches!(cli.command, Command::Run) && cli.config.is_none() {
        return Err(Failure::Usage("run requires --config".into()));
    }
    let cfg = build_config(cli.config.as_deref(), &overrides, pipeline, cli.seed)?;
    let dir = run_pipeline(&cfg)?;
    print_json(&json!({"pipeline": cfg.pipeline, "artifacts": dir}));
    Ok(())
}

/// Separates `--key=value` arguments whose key is not a declared option.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut known = HashSet::new();
    let mut stack = vec![Cli::command()];
    while let Some(cmd) = stack.pop() {
        known.extend(cmd.get_arguments().filter_map(|a| a.get_long().map(str::to_string)));
        stack.extend(cmd.get_subcommands().cloned());
    }
    known.extend(["help".to_string(), "version".to_string()]);
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in argv {
        let pair = arg
            .strip_prefix("--")
            .and_then(|a| a.split_once('='))
            .filter(|(k, _)| !k.is_empty() && !known.contains(*k));
        match pair {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn config_error(msg: String) -> Error {
    Error::Config(msg)
}

/// Config file, with its relative paths resolved against its directory,
/// then overrides (relative to the working directory), pipeline and seed.
fn build_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
    pipeline: Option<Pipeline>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut base = match path {
        Some(p) => {
            let raw = fs::read(p).map_err(|e| Error::File {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })?;
            let mut cfg: ExperimentConfig =
                serde_json::from_slice(&raw).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            cfg.resolve_paths(p.parent().unwrap_or(Path::new(".")));
            serde_json::to_value(cfg)?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    for (key, raw) in overrides {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        set_dotted(&mut base, key, value).map_err(config_error)?;
    }
    if let Some(p) = pipeline {
        base["pipeline"] = serde_json::to_value(p)?;
    }
    if let Some(s) = seed {
        base["seed"] = json!(s);
    }
    serde_json::from_value(base).map_err(|e| config_error(e.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(format!("malformed key '{key}'"));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(format!("'{}' is not an object", parts[..i].join(".")));
            }
        }
        let obj = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn print_json(v: &Value) {
    println!("{v}");
}

fn file_error(path: &Path, e: impl ToString) -> Error {
    Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| file_error(path, e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| file_error(path, e))?))
}

fn load_sessions(input: &Path, lenient: bool) -> Result<(Vec<Session>, usize)> {
    let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let parsed = parse_clicks(open(input)?, mode)?;
    Ok((build_sessions(parsed.clicks), parsed.skipped))
}

fn run_tool(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, lenient, out } => {
            let (sessions, skipped) = load_sessions(&input, lenient)?;
            let clicks: Vec<_> = sessions.iter().flat_map(|s| s.clicks.iter().cloned()).collect();
            let items: HashSet<u64> = clicks.iter().map(|c| c.item_id).collect();
            if let Some(out) = &out {
                let mut w = create(out)?;
                write_clicks(&mut w, &clicks)?;
                w.flush()?;
            }
            let days = sessions.iter().map(Session::day);
            print_json(&json!({
                "clicks": clicks.len(),
                "sessions": sessions.len(),
                "items": items.len(),
                "skipped_lines": skipped,
                "first_day": days.clone().min().map(day_to_date),
                "last_day": days.max().map(day_to_date),
            }));
        }
        Command::Eval {
            checkpoint,
            examples,
            vocab,
            out,
            batch_size,
            epoch,
        } => {
            let (params, digest) = load_checkpoint(&checkpoint)?;
            if let Some(vocab) = vocab {
                let v = Vocab::read(open(&vocab)?)?;
                if v.digest() != digest {
                    return Err(Error::Checkpoint(format!(
                        "{} does not match the vocabulary the checkpoint was trained with",
                        vocab.display()
                    )));
                }
            }
            let examples = read_examples(open(&examples)?)?;
            let report = evaluate(&params, &examples, batch_size, epoch)?;
            if let Some(out) = out {
                let mut w = create(&out)?;
                report.write_csv(&mut w)?;
                w.flush()?;
            }
            print_json(&serde_json::to_value(report.aggregate())?);
        }
        Command::Histogram {
            input,
            lenient,
            cap,
            out,
        } => {
            let (sessions, _) = load_sessions(&input, lenient)?;
            let hist = dwell_histogram(&sessions, cap)?;
            match out {
                Some(out) => {
                    let mut w = create(&out)?;
                    write_histogram(&mut w, &hist)?;
                    w.flush()?;
                }
                None => {
                    let mut buf = Vec::new();
                    write_histogram(&mut buf, &hist)?;
                    match io::stdout().lock().write_all(&buf) {
                        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                        other => other?,
                    }
                }
            }
        }
        Command::Compare { a, b } => {
            let ra = EvalReport::read_csv(open(&a)?, 0)?;
            let rb = EvalReport::read_csv(open(&b)?, 0)?;
            let test = compare_reports(&ra, &rb)?;
            print_json(&json!({
                "a": ra.aggregate(),
                "b": rb.aggregate(),
                "wilcoxon": test,
            }));
        }
        _ => unreachable!("pipeline subcommands are dispatched separately"),
    }
    Ok(())
}
