//! Session filtering, temporal splits, validation folds, dwell-time
//! bucketing and prefix augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{build_vocab, Session, Vocab};
use crate::error::{Error, Result};

/// One training or evaluation instance: a session prefix and the next item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub session_id: u64,
    /// Dense vocabulary indices.
    pub input_items: Vec<usize>,
    /// Dwell bucket of each input item, aligned with `input_items`.
    pub input_dwell: Vec<usize>,
    pub target_item: usize,
}

impl Example {
    pub fn len(&self) -> usize {
        self.input_items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub min_len: usize,
    pub min_support: usize,
    pub max_len: usize,
    pub dwell_cap_seconds: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_len: 2,
            min_support: 5,
            max_len: 16,
            dwell_cap_seconds: 3600,
        }
    }
}

impl PreprocessConfig {
    /// Longest model input: a session of `max_len` yields prefixes up to `max_len - 1`.
    pub fn max_input_len(&self) -> usize {
        self.max_len.saturating_sub(1).max(1)
    }
}

/// Single-pass filter, applied in this order:
/// drop short sessions, drop clicks on rare items, drop sessions that became
/// short, drop long sessions.
pub fn filter_dataset(sessions: &[Session], cfg: &PreprocessConfig) -> Vec<Session> {
    let long_enough: Vec<&Session> = sessions.iter().filter(|s| s.len() >= cfg.min_len).collect();
    let mut support: HashMap<u64, usize> = HashMap::new();
    for item in long_enough.iter().flat_map(|s| s.items()) {
        *support.entry(item).or_default() += 1;
    }
    long_enough
        .into_iter()
        .filter_map(|s| {
            let clicks: Vec<_> = s
                .clicks
                .iter()
                .filter(|c| support[&c.item_id] >= cfg.min_support)
                .cloned()
                .collect();
            (clicks.len() >= cfg.min_len && clicks.len() <= cfg.max_len).then_some(Session {
                session_id: s.session_id,
                clicks,
            })
        })
        .collect()
}

/// Train/held-out partition by the UTC day of each session's last click.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<Session>,
    pub heldout: Vec<Session>,
    /// Days since the Unix epoch.
    pub boundary_day: i64,
}

impl SplitSpec {
    pub fn boundary_date(&self) -> String {
        day_to_date(self.boundary_day)
    }
}

pub fn day_to_date(day: i64) -> String {
    chrono::DateTime::from_timestamp(day * 86_400, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| day.to_string())
}

/// Held-out set is every session ending on the latest day.
pub fn temporal_split(sessions: &[Session]) -> Result<SplitSpec> {
    let boundary_day = sessions
        .iter()
        .map(Session::day)
        .max()
        .ok_or(Error::Empty("temporal_split needs sessions"))?;
    let (heldout, train): (Vec<_>, Vec<_>) = sessions.iter().cloned().partition(|s| s.day() == boundary_day);
    if train.is_empty() {
        return Err(Error::DegenerateSplit);
    }
    Ok(SplitSpec {
        train,
        heldout,
        boundary_day,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub train: Vec<Session>,
    pub val: Vec<Session>,
    pub val_day: i64,
}

/// Validation folds over the last `n` distinct days of `train`.
///
/// Fold `i` validates on the `i`-th of those days and trains on everything
/// strictly earlier.
pub fn make_folds(train: &[Session], n: usize) -> Result<Vec<Fold>> {
    let days: BTreeSet<i64> = train.iter().map(Session::day).collect();
    if n == 0 || days.len() < n + 1 {
        return Err(Error::InsufficientDays {
            needed: n + 1,
            found: days.len(),
        });
    }
    let val_days: Vec<i64> = days.iter().copied().skip(days.len() - n).collect();
    Ok(val_days
        .into_iter()
        .map(|d| Fold {
            train: train.iter().filter(|s| s.day() < d).cloned().collect(),
            val: train.iter().filter(|s| s.day() == d).cloned().collect(),
            val_day: d,
        })
        .collect())
}

pub fn item_set(sessions: &[Session]) -> HashSet<u64> {
    sessions.iter().flat_map(|s| s.items()).collect()
}

/// Drops clicks on items absent from `known`, then sessions shorter than `min_len`.
pub fn filter_unseen(sessions: &[Session], known: &HashSet<u64>, min_len: usize) -> Vec<Session> {
    sessions
        .iter()
        .filter_map(|s| {
            let clicks: Vec<_> = s
                .clicks
                .iter()
                .filter(|c| known.contains(&c.item_id))
                .cloned()
                .collect();
            (clicks.len() >= min_len).then_some(Session {
                session_id: s.session_id,
                clicks,
            })
        })
        .collect()
}

/// Dwell bucket per click except the last: the gap to the next click,
/// rounded half away from zero to whole seconds, clamped to `cap_seconds`.
pub fn compute_dwell(session: &Session, cap_seconds: u32) -> Result<Vec<usize>> {
    session
        .clicks
        .windows(2)
        .map(|w| {
            let gap = w[1].timestamp_ms - w[0].timestamp_ms;
            if gap < 0 {
                return Err(Error::Ordering {
                    session_id: session.session_id,
                    earlier: w[0].timestamp_ms,
                    later: w[1].timestamp_ms,
                });
            }
            let secs = (gap + 500) / 1000;
            Ok(secs.min(cap_seconds as i64) as usize)
        })
        .collect()
}

/// Every prefix of `session` as an example: `k` clicks give `k - 1` examples.
pub fn augment(session: &Session, vocab: &Vocab, cap_seconds: u32) -> Result<Vec<Example>> {
    let items = session
        .items()
        .map(|i| vocab.index_of(i).ok_or(Error::UnknownItem(i)))
        .collect::<Result<Vec<_>>>()?;
    let dwell = compute_dwell(session, cap_seconds)?;
    Ok((1..items.len())
        .map(|p| Example {
            session_id: session.session_id,
            input_items: items[..p].to_vec(),
            input_dwell: dwell[..p].to_vec(),
            target_item: items[p],
        })
        .collect())
}

/// Only the full-length prefix (predict the final click).
pub fn last_prefix(session: &Session, vocab: &Vocab, cap_seconds: u32) -> Result<Option<Example>> {
    Ok(augment(session, vocab, cap_seconds)?.pop())
}

pub fn augment_all(sessions: &[Session], vocab: &Vocab, cap_seconds: u32) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(augment(s, vocab, cap_seconds)?);
    }
    Ok(out)
}

pub fn last_prefix_all(sessions: &[Session], vocab: &Vocab, cap_seconds: u32) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(last_prefix(s, vocab, cap_seconds)?);
    }
    Ok(out)
}

pub fn dwell_histogram(sessions: &[Session], cap_seconds: u32) -> Result<BTreeMap<usize, u64>> {
    let mut hist = BTreeMap::new();
    for s in sessions {
        for b in compute_dwell(s, cap_seconds)? {
            *hist.entry(b).or_insert(0) += 1;
        }
    }
    Ok(hist)
}

pub fn write_histogram<W: Write>(mut w: W, hist: &BTreeMap<usize, u64>) -> Result<()> {
    writeln!(w, "bucket,count")?;
    for (b, c) in hist {
        writeln!(w, "{b},{c}")?;
    }
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// One example per line: `session_id<TAB>items<TAB>dwells<TAB>target`.
pub fn write_examples<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for e in examples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            e.session_id,
            join(&e.input_items),
            join(&e.input_dwell),
            e.target_item
        )?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: format!("{msg} in {line:?}"),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let list =
            |s: &str| -> Result<Vec<usize>> { s.split(',').map(|x| x.parse().map_err(|_| bad("bad index"))).collect() };
        let e = Example {
            session_id: fields[0].parse().map_err(|_| bad("bad session id"))?,
            input_items: list(fields[1])?,
            input_dwell: list(fields[2])?,
            target_item: fields[3].parse().map_err(|_| bad("bad target"))?,
        };
        if e.input_items.len() != e.input_dwell.len() || e.input_items.is_empty() {
            return Err(bad("items and dwells must be nonempty and aligned"));
        }
        out.push(e);
    }
    Ok(out)
}

/// Session/click counts in the style of a dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub sessions: usize,
    pub clicks: usize,
    pub items: usize,
    pub avg_session_length: f64,
    pub examples: usize,
}

impl SetStats {
    pub fn of(sessions: &[Session], examples: usize) -> Self {
        let clicks: usize = sessions.iter().map(Session::len).sum();
        SetStats {
            sessions: sessions.len(),
            clicks,
            items: item_set(sessions).len(),
            avg_session_length: if sessions.is_empty() {
                0.0
            } else {
                clicks as f64 / sessions.len() as f64
            },
            examples,
        }
    }
}

/// Vocabulary plus example sets for one train/evaluation partition.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub train_stats: SetStats,
    pub eval_stats: SetStats,
}

/// Builds the vocabulary from `train`, drops unseen items from `eval`, and
/// augments both. `augment_eval = false` keeps only each evaluation
/// session's final prefix.
pub fn prepare_partition(
    train: &[Session],
    eval: &[Session],
    cfg: &PreprocessConfig,
    augment_eval: bool,
) -> Result<Prepared> {
    let vocab = build_vocab(train, cfg.dwell_cap_seconds)?;
    let known = item_set(train);
    let eval = filter_unseen(eval, &known, cfg.min_len);
    let train_ex = augment_all(train, &vocab, cfg.dwell_cap_seconds)?;
    let eval_ex = if augment_eval {
        augment_all(&eval, &vocab, cfg.dwell_cap_seconds)?
    } else {
        last_prefix_all(&eval, &vocab, cfg.dwell_cap_seconds)?
    };
    Ok(Prepared {
        train_stats: SetStats::of(train, train_ex.len()),
        eval_stats: SetStats::of(&eval, eval_ex.len()),
        vocab,
        train: train_ex,
        eval: eval_ex,
    })
}
