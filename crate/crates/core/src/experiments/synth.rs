//! Synthetic click streams in which dwell time carries a controllable amount
//! of information about the next item.
//!
//! Every item `i` owns a window of `successors` ring neighbours
//! (`i+1 ..= i+successors`) and a disjoint skip pool of `branching` items
//! drawn once per seed. At each step a walker moves into the successor
//! window with probability `signal` after a long dwell, otherwise into the
//! skip pool after a short dwell. On `flip_days` the dwell class is swapped
//! with probability `flip_prob`, which makes those days harder for a model
//! that relies on dwell.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Click, Session, MS_PER_DAY};
use crate::error::{Error, Result};

/// 2014-04-01T00:00:00Z
pub const DEFAULT_START_MS: i64 = 1_396_310_400_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_items: usize,
    pub num_sessions: usize,
    pub days: usize,
    pub signal: f64,
    /// Seconds, inclusive.
    pub dwell_short: (f64, f64),
    pub dwell_long: (f64, f64),
    pub branching: usize,
    pub successors: usize,
    /// Probability of one more click once a session has two.
    pub continue_prob: f64,
    pub max_session_len: usize,
    pub start_ms: i64,
    /// Zero-based day indices on which dwell classes may be swapped.
    pub flip_days: Vec<usize>,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_items: 200,
            num_sessions: 20_000,
            days: 8,
            signal: 0.9,
            dwell_short: (1.0, 5.0),
            dwell_long: (30.0, 40.0),
            branching: 4,
            successors: 20,
            continue_prob: 0.7,
            max_session_len: 16,
            start_ms: DEFAULT_START_MS,
            flip_days: Vec::new(),
            flip_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.branching < 2 {
            return bad(format!("branching must be >= 2, got {}", self.branching));
        }
        if self.successors < 1 {
            return bad("successors must be >= 1".into());
        }
        if self.num_items < 1 + self.successors + self.branching {
            return bad(format!(
                "num_items {} too small for {} successors plus a skip pool of {}",
                self.num_items, self.successors, self.branching
            ));
        }
        if self.num_sessions == 0 || self.days == 0 {
            return bad("num_sessions and days must be >= 1".into());
        }
        for (name, p) in [
            ("signal", self.signal),
            ("flip_prob", self.flip_prob),
            ("continue_prob", self.continue_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.continue_prob >= 1.0 {
            return bad("continue_prob must be < 1".into());
        }
        let (s, l) = (self.dwell_short, self.dwell_long);
        if !(0.0 <= s.0 && s.0 <= s.1 && l.0 <= l.1) {
            return bad("dwell ranges must be ordered and nonnegative".into());
        }
        // Disjoint after rounding to whole seconds.
        if s.1.round() >= l.0.round() {
            return bad(format!("dwell ranges overlap: {s:?} vs {l:?}"));
        }
        if self.max_session_len < 2 {
            return bad("max_session_len must be >= 2".into());
        }
        if let Some(&d) = self.flip_days.iter().find(|&&d| d >= self.days) {
            return bad(format!("flip day {d} outside 0..{}", self.days));
        }
        let span = self.session_span_ms();
        if span >= MS_PER_DAY {
            return bad("sessions could span more than a day".into());
        }
        if self.start_ms < 0 || self.start_ms.rem_euclid(MS_PER_DAY) != 0 {
            return bad("start_ms must be a nonnegative UTC midnight".into());
        }
        Ok(())
    }

    /// Upper bound on a session's duration.
    pub fn session_span_ms(&self) -> i64 {
        let longest = self.dwell_short.1.max(self.dwell_long.1);
        (self.max_session_len as i64 - 1) * (longest * 1000.0).ceil() as i64
    }

    /// Bucket threshold separating short from long dwell.
    pub fn long_threshold_seconds(&self) -> usize {
        ((self.dwell_short.1.round() + self.dwell_long.0.round()) / 2.0).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Successor,
    Skip,
}

/// The fixed transition structure drawn from a spec's seed.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    num_items: usize,
    successors: usize,
    skip_pools: Vec<Vec<usize>>,
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_items;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let skip_pools = (0..n)
            .map(|i| {
                // Candidates exclude i and its successor window.
                let free = n - 1 - spec.successors;
                sample(&mut rng, free, spec.branching)
                    .into_iter()
                    .map(|k| (i + 1 + spec.successors + k) % n)
                    .collect()
            })
            .collect();
        Ok(SynthWorld {
            num_items: n,
            successors: spec.successors,
            skip_pools,
        })
    }

    /// Zero-based item index to the id written in the click log.
    pub fn item_id(index: usize) -> u64 {
        index as u64 + 1
    }

    pub fn item_index(id: u64) -> usize {
        id as usize - 1
    }

    pub fn successors_of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (1..=self.successors).map(move |k| (i + k) % self.num_items)
    }

    pub fn skip_pool(&self, i: usize) -> &[usize] {
        &self.skip_pools[i]
    }

    pub fn classify(&self, from: usize, to: usize) -> Option<Move> {
        let ahead = (to + self.num_items - from) % self.num_items;
        if (1..=self.successors).contains(&ahead) {
            Some(Move::Successor)
        } else if self.skip_pools[from].contains(&to) {
            Some(Move::Skip)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub clicks: Vec<Click>,
    pub sessions_per_day: Vec<usize>,
    pub clicks_per_day: Vec<usize>,
    pub world: SynthWorld,
}

fn draw_dwell_ms(rng: &mut ChaCha8Rng, range: (f64, f64)) -> i64 {
    let lo = (range.0 * 1000.0).round() as i64;
    let hi = (range.1 * 1000.0).round() as i64;
    rng.gen_range(lo..=hi)
}

/// Generates the click log. Sessions never cross midnight, so the day a
/// session starts on is also the day it ends on.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    let world = SynthWorld::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5157_4e54_4845_5449);
    let start_window = MS_PER_DAY - spec.session_span_ms();

    let mut sessions: Vec<(i64, Vec<(i64, usize)>)> = Vec::with_capacity(spec.num_sessions);
    let mut sessions_per_day = vec![0; spec.days];
    let mut clicks_per_day = vec![0; spec.days];
    for _ in 0..spec.num_sessions {
        let day = rng.gen_range(0..spec.days);
        let flip = if spec.flip_days.contains(&day) {
            spec.flip_prob
        } else {
            0.0
        };
        let mut len = 2;
        while len < spec.max_session_len && rng.gen_bool(spec.continue_prob) {
            len += 1;
        }
        let mut t = spec.start_ms + day as i64 * MS_PER_DAY + rng.gen_range(0..start_window);
        let mut item = rng.gen_range(0..spec.num_items);
        let mut clicks = vec![(t, item)];
        for _ in 1..len {
            let to_successor = rng.gen_bool(spec.signal);
            let long = to_successor != rng.gen_bool(flip);
            t += draw_dwell_ms(&mut rng, if long { spec.dwell_long } else { spec.dwell_short });
            item = if to_successor {
                (item + rng.gen_range(1..=spec.successors)) % spec.num_items
            } else {
                world.skip_pools[item][rng.gen_range(0..spec.branching)]
            };
            clicks.push((t, item));
        }
        sessions_per_day[day] += 1;
        clicks_per_day[day] += len;
        sessions.push((clicks[0].0, clicks));
    }
    // Session ids follow start time.
    sessions.sort_by_key(|s| s.0);
    let clicks = sessions
        .into_iter()
        .enumerate()
        .flat_map(|(k, (_, cs))| {
            cs.into_iter().map(move |(t, i)| Click {
                session_id: k as u64 + 1,
                timestamp_ms: t,
                item_id: SynthWorld::item_id(i),
                category: "0".to_string(),
            })
        })
        .collect();
    Ok(SynthCorpus {
        clicks,
        sessions_per_day,
        clicks_per_day,
        world,
    })
}

/// Empirical mutual information (nats) between the dwell class of each
/// click and the kind of move that follows it.
pub fn dwell_move_information(sessions: &[Session], world: &SynthWorld, spec: &SynthSpec) -> f64 {
    let threshold = spec.long_threshold_seconds() as i64;
    let mut joint: HashMap<(bool, Option<Move>), f64> = HashMap::new();
    let mut total = 0.0;
    for s in sessions {
        for w in s.clicks.windows(2) {
            let long = (w[1].timestamp_ms - w[0].timestamp_ms + 500) / 1000 >= threshold;
            let mv = world.classify(
                SynthWorld::item_index(w[0].item_id),
                SynthWorld::item_index(w[1].item_id),
            );
            *joint.entry((long, mv)).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut px: HashMap<bool, f64> = HashMap::new();
    let mut py: HashMap<Option<Move>, f64> = HashMap::new();
    for (&(x, y), &c) in &joint {
        *px.entry(x).or_default() += c / total;
        *py.entry(y).or_default() += c / total;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let p = c / total;
            p * (p / (px[&x] * py[&y])).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Probability mass of the `k` most likely next items, averaged over the
/// information available to the predictor, by enumeration of the generative
/// process. `dwell_aware` predictors see the dwell class of the current
/// click; `flip` is the class swap probability of the day being scored.
pub fn bayes_recall(spec: &SynthSpec, k: usize, dwell_aware: bool, flip: f64) -> f64 {
    let s = spec.signal;
    let per_succ = 1.0 / spec.successors as f64;
    let per_skip = 1.0 / spec.branching as f64;
    // Joint mass over (class, move); the structure is identical for every
    // current item, so one item suffices.
    let cells = [
        (s * (1.0 - flip), s * flip),                 // successor: (long, short)
        ((1.0 - s) * flip, (1.0 - s) * (1.0 - flip)), // skip: (long, short)
    ];
    let top_mass = |succ: f64, skip: f64| -> f64 {
        let mut probs: Vec<f64> = std::iter::repeat_n(succ * per_succ, spec.successors)
            .chain(std::iter::repeat_n(skip * per_skip, spec.branching))
            .collect();
        probs.sort_by(|a, b| b.total_cmp(a));
        probs.iter().take(k).sum()
    };
    if dwell_aware {
        top_mass(cells[0].0, cells[1].0) + top_mass(cells[0].1, cells[1].1)
    } else {
        top_mass(s, 1.0 - s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SynthSpec::default().validate().unwrap();
        assert_eq!(SynthSpec::default().long_threshold_seconds(), 18);
    }

    #[test]
    fn rejects_bad_specs() {
        let base = SynthSpec::default();
        for spec in [
            SynthSpec {
                branching: 1,
                ..base.clone()
            },
            SynthSpec {
                signal: 1.5,
                ..base.clone()
            },
            SynthSpec {
                dwell_long: (4.0, 40.0),
                ..base.clone()
            },
            SynthSpec {
                num_items: 10,
                ..base.clone()
            },
            SynthSpec {
                flip_days: vec![8],
                ..base.clone()
            },
            SynthSpec {
                days: 0,
                ..base.clone()
            },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn skip_pools_avoid_successor_window() {
        let spec = SynthSpec {
            num_items: 30,
            successors: 5,
            ..Default::default()
        };
        let w = SynthWorld::new(&spec).unwrap();
        for i in 0..30 {
            let pool = w.skip_pool(i);
            assert_eq!(pool.len(), 4);
            for &j in pool {
                assert_ne!(j, i);
                assert_eq!(w.classify(i, j), Some(Move::Skip));
            }
            for j in w.successors_of(i) {
                assert_eq!(w.classify(i, j), Some(Move::Successor));
            }
        }
    }

    #[test]
    fn bayes_worked_example() {
        let spec = SynthSpec {
            signal: 0.9,
            branching: 4,
            successors: 1,
            ..Default::default()
        };
        assert!((bayes_recall(&spec, 1, true, 0.0) - 0.925).abs() < 1e-12);
        assert!((bayes_recall(&spec, 1, false, 0.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn bayes_gap_at_twenty() {
        let spec = SynthSpec::default();
        assert!((bayes_recall(&spec, 20, true, 0.0) - 1.0).abs() < 1e-12);
        assert!((bayes_recall(&spec, 20, false, 0.0) - 0.9).abs() < 1e-12);
        let flat = SynthSpec { signal: 0.0, ..spec };
        assert!((bayes_recall(&flat, 20, true, 0.0) - bayes_recall(&flat, 20, false, 0.0)).abs() < 1e-12);
    }
}
