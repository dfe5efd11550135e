//! Config-driven pipelines that write every report, log and checkpoint to
//! an artifacts directory together with a manifest of inputs and seeds.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{bayes_recall, dwell_move_information, synth_generate, SynthSpec};
use super::{grid_search, selection_study, train_and_evaluate, GridSpec};
use crate::dataset::{build_sessions, hex_digest, parse_clicks, write_clicks, ParseMode, Session};
use crate::error::{Error, Result};
use crate::evaluation::wilcoxon_signed_rank;
use crate::model::{ModelKind, ModelSpec};
use crate::preprocess::{
    filter_dataset, prepare_partition, temporal_split, write_examples, Prepared, PreprocessConfig, SetStats, SplitSpec,
};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Ingest, preprocess, train one model, evaluate every epoch.
    #[default]
    Train,
    /// Ingest and preprocess only: vocabulary, example files and stats.
    Preprocess,
    /// Train every entry of `configs` on the same split and test each
    /// against the first.
    Compare,
    /// DT-RNN grid on the last training day as validation.
    Grid,
    /// Fold-based model selection plus held-out test scores.
    Folds,
    /// Only write the synthetic corpus.
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub output_dir: PathBuf,
    /// Click CSV. When absent a corpus is generated from `synth`.
    pub input: Option<PathBuf>,
    pub parse_mode: ParseMode,
    /// Model initialization and shuffling seed; overrides `train.seed`.
    pub seed: u64,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub model: ModelSpec,
    /// Model list for `compare` and `folds`.
    pub configs: Vec<ModelSpec>,
    pub grid: GridSpec,
    pub train: TrainConfig,
    pub folds: usize,
    /// Evaluate on every prefix of each held-out session rather than the last.
    pub augment_eval: bool,
    pub write_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pipeline: Pipeline::Train,
            output_dir: PathBuf::from("artifacts"),
            input: None,
            parse_mode: ParseMode::Strict,
            seed: 0,
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSpec::default(),
            configs: Vec::new(),
            grid: GridSpec::default(),
            train: TrainConfig::default(),
            folds: 6,
            augment_eval: true,
            write_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            checkpoint_dir: None,
            ..self.train.clone()
        }
    }

    /// `configs`, or a pipeline-specific default built from `model`.
    pub fn model_list(&self) -> Vec<ModelSpec> {
        if !self.configs.is_empty() {
            return self.configs.clone();
        }
        let m = self.model;
        match self.pipeline {
            Pipeline::Folds => vec![ModelSpec { dt_em_size: 16, ..m }, ModelSpec { dt_em_size: 32, ..m }],
            _ => vec![
                ModelSpec {
                    kind: ModelKind::ItRnn,
                    ..m
                },
                ModelSpec {
                    kind: ModelKind::DtRnn,
                    ..m
                },
            ],
        }
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let Some(input) = &self.input {
            if input.is_relative() {
                self.input = Some(base.join(input));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub generated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pipeline: Pipeline,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub synth_seed: Option<u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

/// Collects artifacts under one directory and remembers their names.
struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| file_error(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write<F>(&mut self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| file_error(parent, e))?;
        }
        let mut w = BufWriter::new(File::create(&path).map_err(|e| file_error(&path, e))?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Reads a JSON config, resolves its relative paths against the config's
/// directory and runs it. Returns the artifacts directory.
pub fn run_experiment(config_path: &Path) -> Result<PathBuf> {
    let raw = fs::read(config_path).map_err(|e| file_error(config_path, e))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_slice(&raw).map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    run_pipeline(&cfg)
}

/// Sessions from `cfg.input`, or from the synthetic generator.
fn load_sessions(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(Vec<Session>, InputRecord)> {
    match &cfg.input {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| file_error(path, e))?;
            let parsed = parse_clicks(BufReader::new(bytes.as_slice()), cfg.parse_mode)?;
            let record = InputRecord {
                path: path.display().to_string(),
                sha256: hex_digest(&bytes),
                bytes: bytes.len() as u64,
                generated: false,
            };
            Ok((build_sessions(parsed.clicks), record))
        }
        None => {
            let corpus = synth_generate(&cfg.synth)?;
            let mut csv = Vec::new();
            write_clicks(&mut csv, &corpus.clicks)?;
            out.write("clicks.csv", |w| Ok(w.write_all(&csv)?))?;
            let sessions = build_sessions(corpus.clicks.clone());
            out.json(
                "synth.json",
                &serde_json::json!({
                    "spec": cfg.synth,
                    "sessions_per_day": corpus.sessions_per_day,
                    "clicks_per_day": corpus.clicks_per_day,
                    "dwell_move_information": dwell_move_information(&sessions, &corpus.world, &cfg.synth),
                    "bayes_recall_at_20": {
                        "dwell_aware": bayes_recall(&cfg.synth, 20, true, 0.0),
                        "dwell_blind": bayes_recall(&cfg.synth, 20, false, 0.0),
                    },
                }),
            )?;
            let record = InputRecord {
                path: "clicks.csv".into(),
                sha256: hex_digest(&csv),
                bytes: csv.len() as u64,
                generated: true,
            };
            Ok((sessions, record))
        }
    }
}

/// Filter, temporal split, vocabulary and examples.
pub fn prepare_corpus(
    sessions: &[Session],
    pre: &PreprocessConfig,
    augment_eval: bool,
) -> Result<(SplitSpec, Prepared)> {
    let filtered = filter_dataset(sessions, pre);
    let split = temporal_split(&filtered)?;
    let prepared = prepare_partition(&split.train, &split.heldout, pre, augment_eval)?;
    Ok((split, prepared))
}

fn write_prepared(out: &mut Artifacts, split: &SplitSpec, data: &Prepared) -> Result<()> {
    out.write("vocab.tsv", |w| data.vocab.write(w))?;
    out.write("train_examples.tsv", |w| write_examples(w, &data.train))?;
    out.write("test_examples.tsv", |w| write_examples(w, &data.eval))?;
    out.json(
        "stats.json",
        &serde_json::json!({
            "boundary_day": split.boundary_date(),
            "train": data.train_stats,
            "test": data.eval_stats,
            "vocab_digest": data.vocab.digest(),
        }),
    )?;
    Ok(())
}

fn slug(spec: &ModelSpec) -> String {
    match spec.kind {
        ModelKind::ItRnn => format!("it_rnn_{}_{}", spec.item_em_size, spec.it_rnn_size),
        ModelKind::DtRnn => format!(
            "dt_rnn_{}_{}_{}_{}",
            spec.item_em_size, spec.it_rnn_size, spec.dt_em_size, spec.dt_rnn_size
        ),
    }
}

/// Trains `spec` and writes its log, per-epoch reports, checkpoints and the
/// best-epoch aggregate under `prefix`.
fn train_one(
    cfg: &ExperimentConfig,
    out: &mut Artifacts,
    prefix: &str,
    spec: &ModelSpec,
    data: &Prepared,
) -> Result<super::RunOutcome> {
    let mut tc = cfg.train_config();
    if cfg.write_checkpoints {
        tc.checkpoint_dir = Some(out.path(&format!("{prefix}checkpoints")));
    }
    let run = train_and_evaluate(spec, data, cfg.preprocess.max_input_len(), &tc)?;
    for e in &run.log.epochs {
        if e.checkpoint.is_some() {
            out.written.push(format!("{prefix}checkpoints/epoch_{}.ckpt", e.epoch));
        }
    }
    out.write(&format!("{prefix}train_log.csv"), |w| run.log.write_csv(w))?;
    for r in &run.reports {
        out.write(&format!("{prefix}eval/epoch_{}.csv", r.epoch), |w| r.write_csv(w))?;
    }
    out.json(&format!("{prefix}aggregate.json"), &run.best_report().aggregate())?;
    Ok(run)
}

/// Runs `cfg` with paths taken as given.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.train.validate()?;
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let (sessions, input) = load_sessions(cfg, &mut out)?;
    match cfg.pipeline {
        Pipeline::Synth => {}
        Pipeline::Preprocess => {
            let (split, data) = prepare_corpus(&sessions, &cfg.preprocess, cfg.augment_eval)?;
            write_prepared(&mut out, &split, &data)?;
        }
        Pipeline::Train => {
            let (split, data) = prepare_corpus(&sessions, &cfg.preprocess, cfg.augment_eval)?;
            write_prepared(&mut out, &split, &data)?;
            train_one(cfg, &mut out, "", &cfg.model, &data)?;
        }
        Pipeline::Compare => {
            let (split, data) = prepare_corpus(&sessions, &cfg.preprocess, cfg.augment_eval)?;
            write_prepared(&mut out, &split, &data)?;
            let specs = cfg.model_list();
            let mut runs = Vec::new();
            for (i, spec) in specs.iter().enumerate() {
                runs.push(train_one(
                    cfg,
                    &mut out,
                    &format!("models/{i}_{}/", slug(spec)),
                    spec,
                    &data,
                )?);
            }
            let reference = runs[0].best_report().reciprocal_ranks();
            let rows = runs
                .iter()
                .map(|r| {
                    let best = r.best_report();
                    Ok(serde_json::json!({
                        "model": r.spec,
                        "label": r.spec.label(),
                        "num_parameters": r.num_parameters,
                        "aggregate": best.aggregate(),
                        "wilcoxon_vs_first": wilcoxon_signed_rank(&best.reciprocal_ranks(), &reference)?,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            out.json("comparison.json", &rows)?;
        }
        Pipeline::Grid => {
            let filtered = filter_dataset(&sessions, &cfg.preprocess);
            let outer = temporal_split(&filtered)?;
            let inner = temporal_split(&outer.train)?;
            let data = prepare_partition(&inner.train, &inner.heldout, &cfg.preprocess, cfg.augment_eval)?;
            let rows = grid_search(
                &cfg.grid,
                &cfg.model,
                &data,
                cfg.preprocess.max_input_len(),
                &cfg.train_config(),
            )?;
            out.write("grid.csv", |w| {
                writeln!(
                    w,
                    "dt_em_size,dt_rnn_size,recall_at_20,mrr_at_20,best_epoch,num_parameters"
                )?;
                for r in &rows {
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        r.spec.dt_em_size,
                        r.spec.dt_rnn_size,
                        r.recall_at_20,
                        r.mrr_at_20,
                        r.best_epoch,
                        r.num_parameters
                    )?;
                }
                Ok(())
            })?;
            out.json("grid.json", &rows)?;
            let top = &rows[0];
            out.json(
                "aggregate.json",
                &serde_json::json!({
                    "recall_at_20": top.recall_at_20,
                    "mrr_at_20": top.mrr_at_20,
                    "n": data.eval.len(),
                    "epoch": top.best_epoch,
                }),
            )?;
        }
        Pipeline::Folds => {
            let filtered = filter_dataset(&sessions, &cfg.preprocess);
            let split = temporal_split(&filtered)?;
            let configs = cfg.model_list();
            let study = selection_study(
                &configs,
                &split.train,
                &split.heldout,
                cfg.folds,
                &cfg.preprocess,
                &cfg.train_config(),
            )?;
            out.write("folds.csv", |w| {
                let labels: Vec<String> = configs.iter().map(|c| c.label()).collect();
                writeln!(w, "val_day,{}", labels.join(","))?;
                for (day, row) in study.folds.val_days.iter().zip(&study.folds.recall) {
                    let vals: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                    writeln!(w, "{day},{}", vals.join(","))?;
                }
                let avgs: Vec<String> = study.folds.averages.iter().map(|x| x.to_string()).collect();
                writeln!(w, "average,{}", avgs.join(","))?;
                Ok(())
            })?;
            out.json("folds.json", &study)?;
            out.json("aggregate.json", &study.test[study.selected])?;
        }
    }
    let manifest = Manifest {
        pipeline: cfg.pipeline,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: hex_digest(&serde_json::to_vec(cfg)?),
        seed: cfg.seed,
        synth_seed: input.generated.then_some(cfg.synth.seed),
        inputs: vec![input],
        outputs: out.written.clone(),
    };
    out.json("manifest.json", &manifest)?;
    Ok(out.dir)
}

/// Set statistics for a preprocessed corpus, as written to `stats.json`.
pub fn corpus_stats(sessions: &[Session], pre: &PreprocessConfig) -> Result<(SetStats, SetStats)> {
    let (_, data) = prepare_corpus(sessions, pre, true)?;
    Ok((data.train_stats, data.eval_stats))
}
