//! Ranking metrics, best-epoch selection, fold averaging and the Wilcoxon
//! signed-rank test.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Batch, ModelParams};
use crate::preprocess::Example;

/// Cutoff for the reported Recall@K and MRR@K.
pub const CUTOFF: usize = 20;

/// 1-based rank of `target` in `row`: items with higher probability, plus
/// equal-probability items with a smaller index, come first.
pub fn rank_of_target(row: &[f64], target: usize) -> Result<usize> {
    let Some(&pt) = row.get(target) else {
        return Err(Error::Index {
            what: "probability row",
            index: target,
            size: row.len(),
        });
    };
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p > pt || (p == pt && j < target))
        .count();
    Ok(1 + ahead)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().map(|&r| reciprocal_rank(r, k)).sum::<f64>() / ranks.len() as f64)
}

#[inline]
pub fn reciprocal_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub session_id: u64,
    pub target: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<RankEntry>,
    pub recall_at_20: f64,
    pub mrr_at_20: f64,
    pub n: usize,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub recall_at_20: f64,
    pub mrr_at_20: f64,
    pub n: usize,
    pub epoch: usize,
}

impl EvalReport {
    pub fn from_entries(entries: Vec<RankEntry>, epoch: usize) -> Result<Self> {
        let ranks: Vec<usize> = entries.iter().map(|e| e.rank).collect();
        Ok(EvalReport {
            recall_at_20: recall_at_k(&ranks, CUTOFF)?,
            mrr_at_20: mrr_at_k(&ranks, CUTOFF)?,
            n: entries.len(),
            entries,
            epoch,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.rank).collect()
    }

    /// Per-example reciprocal rank at the report cutoff.
    pub fn reciprocal_ranks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| reciprocal_rank(e.rank, CUTOFF)).collect()
    }

    pub fn aggregate(&self) -> Aggregate {
        Aggregate {
            recall_at_20: self.recall_at_20,
            mrr_at_20: self.mrr_at_20,
            n: self.n,
            epoch: self.epoch,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "session_id,target,rank")?;
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.session_id, e.target, e.rank)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R, epoch: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("expected session_id,target,rank in {line:?}"),
            };
            let mut it = line.split(',');
            let mut next = || it.next().ok_or_else(bad);
            let session_id = next()?.parse().map_err(|_| bad())?;
            let target = next()?.parse().map_err(|_| bad())?;
            let rank = next()?.parse().map_err(|_| bad())?;
            entries.push(RankEntry {
                session_id,
                target,
                rank,
            });
        }
        EvalReport::from_entries(entries, epoch)
    }
}

/// Ranks every example's target under `params`.
pub fn evaluate(params: &ModelParams, examples: &[Example], batch_size: usize, epoch: usize) -> Result<EvalReport> {
    let max_len = params.config.base().max_len;
    let mut entries = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk, max_len)?;
        let (probs, _) = forward(params, &batch)?;
        for (r, e) in chunk.iter().enumerate() {
            entries.push(RankEntry {
                session_id: e.session_id,
                target: e.target_item,
                rank: rank_of_target(probs.row(r), e.target_item)?,
            });
        }
    }
    EvalReport::from_entries(entries, epoch)
}

/// Report with the highest Recall@20; the earliest wins ties.
pub fn best_epoch(reports: &[EvalReport]) -> Result<&EvalReport> {
    let mut best: Option<&EvalReport> = None;
    for r in reports {
        if best.is_none_or(|b| r.recall_at_20 > b.recall_at_20) {
            best = Some(r);
        }
    }
    best.ok_or(Error::Empty("reports"))
}

pub fn fold_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("fold values"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Largest effective sample size handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Average ranks (1-based) of `values`, plus the tie group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Paired two-sided Wilcoxon signed-rank test on `a_i - b_i`.
///
/// Zero differences are dropped. For at most 25 remaining pairs the p-value
/// comes from the exact permutation distribution of `W+` (tied ranks
/// included); otherwise a normal approximation with tie and continuity
/// corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon pairs", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("wilcoxon pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            w: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_two_sided: 1.0,
            method: WilcoxonMethod::Exact,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let (p, method) = if n <= WILCOXON_EXACT_MAX_N {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max_sum + 1];
        counts[0] = 1;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let w2 = (w * 2.0).round() as usize;
        let tail: u64 = counts[..=w2].iter().sum();
        let p = 2.0 * tail as f64 / (1u64 << n) as f64;
        (p.min(1.0), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
            statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
        };
        (p.clamp(0.0, 1.0), WilcoxonMethod::NormalApproximation)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w,
        w_plus,
        w_minus,
        p_two_sided: p,
        method,
    })
}

/// Wilcoxon test on per-example reciprocal ranks of two reports over the
/// same example list (`a - b`).
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<WilcoxonResult> {
    if a.entries.len() != b.entries.len() {
        return Err(Error::shape("compare_reports", a.entries.len(), b.entries.len()));
    }
    for (i, (x, y)) in a.entries.iter().zip(&b.entries).enumerate() {
        if x.session_id != y.session_id || x.target != y.target {
            return Err(Error::shape(
                "compare_reports example",
                format!("row {i}: {}/{}", x.session_id, x.target),
                format!("{}/{}", y.session_id, y.target),
            ));
        }
    }
    wilcoxon_signed_rank(&a.reciprocal_ranks(), &b.reciprocal_ranks())
}
