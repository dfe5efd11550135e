//! Study drivers: single runs, grid search, fold-based model selection and
//! the synthetic dwell-signal corpus.

pub mod runner;
pub mod synth;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::Session;
use crate::error::{Error, Result};
use crate::evaluation::{best_epoch, evaluate, fold_average, Aggregate, EvalReport};
use crate::model::{init_params, ModelKind, ModelParams, ModelSpec};
use crate::numeric::ParamSet;
use crate::preprocess::{make_folds, prepare_partition, Prepared, PreprocessConfig};
use crate::training::{train, TrainConfig, TrainLog};

pub use runner::{run_experiment, run_pipeline, ExperimentConfig, Pipeline};
pub use synth::{bayes_recall, dwell_move_information, synth_generate, Move, SynthCorpus, SynthSpec, SynthWorld};

/// One trained model with its per-epoch evaluation.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub spec: ModelSpec,
    pub num_parameters: usize,
    pub log: TrainLog,
    pub reports: Vec<EvalReport>,
    /// Index into `reports` of the best epoch.
    pub best: usize,
    /// Parameters after the final epoch.
    pub params: ModelParams,
}

impl RunOutcome {
    pub fn best_report(&self) -> &EvalReport {
        &self.reports[self.best]
    }
}

/// Trains `spec` on `data.train`, evaluating on `data.eval` after every
/// epoch. The model is initialized from `cfg.seed`.
pub fn train_and_evaluate(spec: &ModelSpec, data: &Prepared, max_len: usize, cfg: &TrainConfig) -> Result<RunOutcome> {
    if data.eval.is_empty() {
        return Err(Error::Empty("evaluation examples"));
    }
    let config = spec.config(data.vocab.len(), data.vocab.dwell_bucket_count, max_len);
    let mut params = init_params(config, cfg.seed)?;
    let num_parameters = params.num_parameters();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let log = train(&mut params, &data.train, cfg, &data.vocab.digest(), |epoch, p| {
        reports.push(evaluate(p, &data.eval, cfg.batch_size, epoch)?);
        Ok(())
    })?;
    let best_epoch_no = best_epoch(&reports)?.epoch;
    let best = reports.iter().position(|r| r.epoch == best_epoch_no).unwrap_or(0);
    Ok(RunOutcome {
        spec: *spec,
        num_parameters,
        log,
        reports,
        best,
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub dt_em_sizes: Vec<usize>,
    pub dt_rnn_sizes: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dt_em_sizes: vec![4, 8, 16, 32],
            dt_rnn_sizes: vec![4, 8, 16, 32, 64, 128],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dt_em_sizes.is_empty() || self.dt_rnn_sizes.is_empty() {
            return Err(Error::Config("grid lists must be nonempty".into()));
        }
        if self.dt_em_sizes.iter().chain(&self.dt_rnn_sizes).any(|&s| s == 0) {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        Ok(())
    }

    /// DT-RNN specs with the item path of `base` held fixed.
    pub fn cells(&self, base: &ModelSpec) -> Vec<ModelSpec> {
        self.dt_em_sizes
            .iter()
            .flat_map(|&em| {
                self.dt_rnn_sizes.iter().map(move |&rnn| ModelSpec {
                    kind: ModelKind::DtRnn,
                    dt_em_size: em,
                    dt_rnn_size: rnn,
                    ..*base
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub spec: ModelSpec,
    pub recall_at_20: f64,
    pub mrr_at_20: f64,
    pub best_epoch: usize,
    pub num_parameters: usize,
}

/// Descending Recall@20, then MRR@20, then ascending parameter count, then
/// the sizes themselves so the order is total.
fn rank_rows(a: &GridRow, b: &GridRow) -> Ordering {
    b.recall_at_20
        .total_cmp(&a.recall_at_20)
        .then(b.mrr_at_20.total_cmp(&a.mrr_at_20))
        .then(a.num_parameters.cmp(&b.num_parameters))
        .then((a.spec.dt_em_size, a.spec.dt_rnn_size).cmp(&(b.spec.dt_em_size, b.spec.dt_rnn_size)))
}

/// Trains one DT-RNN per grid cell, all from the same seed, and ranks the
/// cells by their best-epoch validation scores.
pub fn grid_search(
    grid: &GridSpec,
    base: &ModelSpec,
    data: &Prepared,
    max_len: usize,
    cfg: &TrainConfig,
) -> Result<Vec<GridRow>> {
    grid.validate()?;
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(Error::Empty("grid search split"));
    }
    let mut rows = grid
        .cells(base)
        .iter()
        .map(|spec| {
            let run = train_and_evaluate(spec, data, max_len, cfg)?;
            let best = run.best_report();
            Ok(GridRow {
                spec: *spec,
                recall_at_20: best.recall_at_20,
                mrr_at_20: best.mrr_at_20,
                best_epoch: best.epoch,
                num_parameters: run.num_parameters,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(rank_rows);
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldStudy {
    pub configs: Vec<ModelSpec>,
    pub val_days: Vec<String>,
    /// `recall[fold][config]`, best-epoch validation Recall@20.
    pub recall: Vec<Vec<f64>>,
    pub averages: Vec<f64>,
    /// Index into `configs` of the highest average; the first wins ties.
    pub winner: usize,
    pub fold_winners: Vec<usize>,
}

impl FoldStudy {
    /// Assembles averages and winners from a finished matrix.
    pub fn from_matrix(configs: Vec<ModelSpec>, val_days: Vec<String>, recall: Vec<Vec<f64>>) -> Result<Self> {
        if recall.is_empty() || configs.is_empty() {
            return Err(Error::Empty("fold matrix"));
        }
        let averages = (0..configs.len())
            .map(|c| fold_average(&recall.iter().map(|row| row[c]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let fold_winners = recall.iter().map(|row| argmax(row)).collect();
        Ok(FoldStudy {
            winner: argmax(&averages),
            configs,
            val_days,
            recall,
            averages,
            fold_winners,
        })
    }

    /// Folds whose own winner differs from the average winner.
    pub fn disagreeing_folds(&self) -> Vec<usize> {
        (0..self.fold_winners.len())
            .filter(|&f| self.fold_winners[f] != self.winner)
            .collect()
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains every config on every fold and selects by average validation
/// Recall@20.
pub fn fold_study(
    configs: &[ModelSpec],
    train_sessions: &[Session],
    n_folds: usize,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
) -> Result<FoldStudy> {
    if configs.is_empty() {
        return Err(Error::Config("fold study needs at least one config".into()));
    }
    let folds = make_folds(train_sessions, n_folds)?;
    let mut recall = Vec::with_capacity(folds.len());
    let mut val_days = Vec::with_capacity(folds.len());
    for fold in &folds {
        let data = prepare_partition(&fold.train, &fold.val, pre, true)?;
        let row = configs
            .iter()
            .map(|spec| {
                Ok(train_and_evaluate(spec, &data, pre.max_input_len(), cfg)?
                    .best_report()
                    .recall_at_20)
            })
            .collect::<Result<Vec<_>>>()?;
        recall.push(row);
        val_days.push(crate::preprocess::day_to_date(fold.val_day));
    }
    FoldStudy::from_matrix(configs.to_vec(), val_days, recall)
}

/// Fold study on the training range plus a held-out test score for every
/// config, to check whether average-based selection picks the config that
/// does best on unseen data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub folds: FoldStudy,
    /// Best-epoch test scores, one per config.
    pub test: Vec<Aggregate>,
    pub test_day: String,
    pub selected: usize,
    pub test_best: usize,
}

pub fn selection_study(
    configs: &[ModelSpec],
    train_sessions: &[Session],
    test_sessions: &[Session],
    n_folds: usize,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
) -> Result<SelectionStudy> {
    let folds = fold_study(configs, train_sessions, n_folds, pre, cfg)?;
    let data = prepare_partition(train_sessions, test_sessions, pre, true)?;
    let test = configs
        .iter()
        .map(|spec| {
            Ok(train_and_evaluate(spec, &data, pre.max_input_len(), cfg)?
                .best_report()
                .aggregate())
        })
        .collect::<Result<Vec<_>>>()?;
    let test_recall: Vec<f64> = test.iter().map(|a| a.recall_at_20).collect();
    let test_day = test_sessions
        .first()
        .map(|s| crate::preprocess::day_to_date(s.day()))
        .unwrap_or_default();
    Ok(SelectionStudy {
        selected: folds.winner,
        test_best: argmax(&test_recall),
        folds,
        test,
        test_day,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(em: usize, rnn: usize) -> ModelSpec {
        ModelSpec::dt_rnn(8, 8, em, rnn)
    }

    #[test]
    fn grid_cells_fix_item_path() {
        let grid = GridSpec {
            dt_em_sizes: vec![4, 8],
            dt_rnn_sizes: vec![2, 3, 5],
        };
        let cells = grid.cells(&ModelSpec::it_rnn(16, 24));
        assert_eq!(cells.len(), 6);
        assert!(cells
            .iter()
            .all(|c| c.kind == ModelKind::DtRnn && c.item_em_size == 16 && c.it_rnn_size == 24));
        assert_eq!(GridSpec::default().cells(&ModelSpec::default()).len(), 24);
    }

    #[test]
    fn ranking_breaks_ties_by_mrr_then_size() {
        let row = |s: ModelSpec, r: f64, m: f64, n: usize| GridRow {
            spec: s,
            recall_at_20: r,
            mrr_at_20: m,
            best_epoch: 1,
            num_parameters: n,
        };
        let mut rows = [
            row(spec(4, 4), 0.5, 0.2, 100),
            row(spec(8, 4), 0.6, 0.1, 300),
            row(spec(4, 8), 0.5, 0.3, 200),
            row(spec(16, 4), 0.5, 0.3, 150),
        ];
        rows.sort_by(rank_rows);
        let order: Vec<(usize, usize)> = rows.iter().map(|r| (r.spec.dt_em_size, r.spec.dt_rnn_size)).collect();
        assert_eq!(order, vec![(8, 4), (16, 4), (4, 8), (4, 4)]);
    }

    #[test]
    fn fold_matrix_bookkeeping() {
        let configs = vec![spec(16, 8), spec(32, 8)];
        let recall = vec![vec![0.5, 0.6], vec![0.7, 0.6], vec![0.4, 0.5]];
        let study = FoldStudy::from_matrix(configs, vec![String::new(); 3], recall).unwrap();
        assert!((study.averages[0] - 1.6 / 3.0).abs() < 1e-12);
        assert!((study.averages[1] - 1.7 / 3.0).abs() < 1e-12);
        assert_eq!(study.winner, 1);
        assert_eq!(study.fold_winners, vec![1, 0, 1]);
        assert_eq!(study.disagreeing_folds(), vec![1]);
    }

    #[test]
    fn constant_folds_average_to_constant() {
        let recall = vec![vec![0.42]; 6];
        let study = FoldStudy::from_matrix(vec![spec(8, 8)], vec![String::new(); 6], recall).unwrap();
        assert!((study.averages[0] - 0.42).abs() < 1e-15);
        assert!(study.disagreeing_folds().is_empty());
    }
}
