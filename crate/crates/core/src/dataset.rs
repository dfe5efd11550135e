//! Click-log ingestion in the RecSys 2015 (yoochoose) layout.
//!
//! Input lines are `session_id,timestamp,item_id,category` with ISO-8601
//! millisecond timestamps in UTC, e.g. `1,2014-04-07T10:51:09.277Z,214536502,0`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MS_PER_DAY: i64 = 86_400_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub session_id: u64,
    pub timestamp_ms: i64,
    pub item_id: u64,
    /// Carried through ingestion, never used by the models.
    pub category: String,
}

impl Click {
    /// UTC calendar day as days since the Unix epoch.
    pub fn day(&self) -> i64 {
        self.timestamp_ms.div_euclid(MS_PER_DAY)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: u64,
    pub clicks: Vec<Click>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = u64> + '_ {
        self.clicks.iter().map(|c| c.item_id)
    }

    pub fn first_timestamp(&self) -> i64 {
        self.clicks.first().map_or(0, |c| c.timestamp_ms)
    }

    pub fn last_timestamp(&self) -> i64 {
        self.clicks.last().map_or(0, |c| c.timestamp_ms)
    }

    /// Day of the session's last click.
    pub fn day(&self) -> i64 {
        self.last_timestamp().div_euclid(MS_PER_DAY)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// Abort on the first malformed line.
    #[default]
    Strict,
    /// Skip malformed lines and count them.
    Lenient,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedClicks {
    pub clicks: Vec<Click>,
    pub skipped: usize,
    /// First few `(line, message)` pairs for skipped lines.
    pub skipped_examples: Vec<(usize, String)>,
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    let body = s.strip_suffix('Z')?;
    let dt = NaiveDateTime::parse_from_str(body, "%Y-%m-%dT%H:%M:%S%.f").ok()?;
    let ms = dt.and_utc().timestamp_millis();
    (ms >= 0).then_some(ms)
}

pub fn format_timestamp(ms: i64) -> String {
    DateTime::from_timestamp_millis(ms)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
        .unwrap_or_else(|| ms.to_string())
}

fn parse_line(line: &str) -> std::result::Result<Click, String> {
    let mut parts = line.splitn(4, ',');
    let (Some(sid), Some(ts), Some(item), Some(cat)) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(format!("expected 4 fields in {line:?}"));
    };
    let session_id = sid.trim().parse().map_err(|_| format!("bad session id {sid:?}"))?;
    let timestamp_ms = parse_timestamp(ts.trim()).ok_or_else(|| format!("bad timestamp {ts:?}"))?;
    let item_id = item.trim().parse().map_err(|_| format!("bad item id {item:?}"))?;
    Ok(Click {
        session_id,
        timestamp_ms,
        item_id,
        category: cat.trim_end_matches(['\r', '\n']).to_string(),
    })
}

/// Parses a headerless click CSV. Blank lines are ignored.
pub fn parse_clicks<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParsedClicks> {
    let mut out = ParsedClicks::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(c) => out.clicks.push(c),
            Err(msg) => match mode {
                ParseMode::Strict => return Err(Error::Parse { line: lineno, msg }),
                ParseMode::Lenient => {
                    out.skipped += 1;
                    if out.skipped_examples.len() < 10 {
                        out.skipped_examples.push((lineno, msg));
                    }
                }
            },
        }
    }
    Ok(out)
}

pub fn write_clicks<W: Write>(mut w: W, clicks: &[Click]) -> Result<()> {
    for c in clicks {
        writeln!(
            w,
            "{},{},{},{}",
            c.session_id,
            format_timestamp(c.timestamp_ms),
            c.item_id,
            c.category
        )?;
    }
    Ok(())
}

/// Groups clicks into sessions.
///
/// Within a session clicks are stably sorted by timestamp, so equal
/// timestamps keep input order. Sessions are ordered by first timestamp;
/// ties keep the order in which the sessions first appear in the input.
pub fn build_sessions(clicks: Vec<Click>) -> Vec<Session> {
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut groups: Vec<Session> = Vec::new();
    for c in clicks {
        let idx = *slot.entry(c.session_id).or_insert_with(|| {
            groups.push(Session {
                session_id: c.session_id,
                clicks: Vec::new(),
            });
            groups.len() - 1
        });
        groups[idx].clicks.push(c);
    }
    for s in &mut groups {
        s.clicks.sort_by_key(|c| c.timestamp_ms);
    }
    groups.sort_by_key(Session::first_timestamp);
    groups
}

/// Bidirectional item id ↔ dense index map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    item_to_index: HashMap<u64, usize>,
    index_to_item: Vec<u64>,
    pub dwell_bucket_count: usize,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.index_to_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_item.is_empty()
    }

    pub fn index_of(&self, item: u64) -> Option<usize> {
        self.item_to_index.get(&item).copied()
    }

    pub fn item_at(&self, index: usize) -> Option<u64> {
        self.index_to_item.get(index).copied()
    }

    pub fn contains(&self, item: u64) -> bool {
        self.item_to_index.contains_key(&item)
    }

    pub fn items(&self) -> &[u64] {
        &self.index_to_item
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dwell_buckets={}", self.dwell_bucket_count)?;
        for (idx, item) in self.index_to_item.iter().enumerate() {
            writeln!(w, "{item}\t{idx}")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Vocab> {
        let mut lines = reader.lines().enumerate();
        let dwell_bucket_count = match lines.next() {
            Some((_, line)) => {
                let line = line?;
                line.strip_prefix("dwell_buckets=")
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or(Error::Parse {
                        line: 1,
                        msg: format!("expected dwell_buckets=<n>, got {line:?}"),
                    })?
            }
            None => return Err(Error::EmptyVocab),
        };
        let mut index_to_item = Vec::new();
        let mut item_to_index = HashMap::new();
        for (i, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let (item, idx) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("expected item<TAB>index, got {line:?}")))?;
            let item: u64 = item.parse().map_err(|_| bad(format!("bad item {item:?}")))?;
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad index {idx:?}")))?;
            if idx != index_to_item.len() || item_to_index.insert(item, idx).is_some() {
                return Err(bad(format!("vocab indices must be dense and unique at {line:?}")));
            }
            index_to_item.push(item);
        }
        if index_to_item.is_empty() {
            return Err(Error::EmptyVocab);
        }
        Ok(Vocab {
            item_to_index,
            index_to_item,
            dwell_bucket_count,
        })
    }
}

/// Indexes items in order of first appearance; dwell buckets are `0..=cap`.
pub fn build_vocab(sessions: &[Session], dwell_cap_seconds: u32) -> Result<Vocab> {
    let mut item_to_index = HashMap::new();
    let mut index_to_item = Vec::new();
    for item in sessions.iter().flat_map(|s| s.items()) {
        item_to_index.entry(item).or_insert_with(|| {
            index_to_item.push(item);
            index_to_item.len() - 1
        });
    }
    if index_to_item.is_empty() {
        return Err(Error::EmptyVocab);
    }
    Ok(Vocab {
        item_to_index,
        index_to_item,
        dwell_bucket_count: dwell_cap_seconds as usize + 1,
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn click(sid: u64, ts: i64, item: u64) -> Click {
        Click {
            session_id: sid,
            timestamp_ms: ts,
            item_id: item,
            category: "0".into(),
        }
    }

    /// Civil-date to day-number conversion (Howard Hinnant's algorithm),
    /// independent of chrono.
    fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
        let y = if m <= 2 { y - 1 } else { y };
        let era = y.div_euclid(400);
        let yoe = y - era * 400;
        let mp = (m + 9) % 12;
        let doy = (153 * mp + 2) / 5 + d - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe - 719_468
    }

    #[test]
    fn parses_reference_line() {
        let expected_ms = days_from_civil(2014, 4, 7) * MS_PER_DAY + ((10 * 60 + 51) * 60 + 9) * 1000 + 277;
        assert_eq!(expected_ms, 1_396_867_869_277);
        let parsed = parse_clicks("1,2014-04-07T10:51:09.277Z,214536502,0\n".as_bytes(), ParseMode::Strict).unwrap();
        assert_eq!(
            parsed.clicks,
            vec![Click {
                session_id: 1,
                timestamp_ms: expected_ms,
                item_id: 214536502,
                category: "0".into()
            }]
        );
    }

    #[test]
    fn empty_stream() {
        let parsed = parse_clicks("".as_bytes(), ParseMode::Strict).unwrap();
        assert!(parsed.clicks.is_empty());
    }

    #[test]
    fn bad_date_is_line_error() {
        match parse_clicks("1,notadate,5,0\n".as_bytes(), ParseMode::Strict) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error at line 1, got {other:?}"),
        }
        let lenient = parse_clicks(
            "1,notadate,5,0\n2,2014-04-07T10:51:09.277Z,3,S\n".as_bytes(),
            ParseMode::Lenient,
        )
        .unwrap();
        assert_eq!(lenient.skipped, 1);
        assert_eq!(lenient.clicks.len(), 1);
        assert_eq!(lenient.clicks[0].category, "S");
    }

    #[test]
    fn missing_z_suffix_rejected() {
        assert!(parse_timestamp("2014-04-07T10:51:09.277").is_none());
        assert_eq!(parse_timestamp("1970-01-01T00:00:00.000Z"), Some(0));
    }

    #[test]
    fn shuffled_session_sorts_identically() {
        let sorted = vec![click(1, 10, 5), click(1, 20, 6), click(1, 30, 7)];
        let shuffled = vec![sorted[2].clone(), sorted[0].clone(), sorted[1].clone()];
        assert_eq!(build_sessions(sorted), build_sessions(shuffled));
    }

    #[test]
    fn interleaved_sessions() {
        let clicks = vec![click(2, 15, 1), click(1, 10, 5), click(2, 5, 9), click(1, 30, 7)];
        let s = build_sessions(clicks);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].session_id, 2);
        assert_eq!(s[0].items().collect::<Vec<_>>(), vec![9, 1]);
        assert_eq!(s[1].items().collect::<Vec<_>>(), vec![5, 7]);
    }

    #[test]
    fn ties_keep_file_order() {
        let s = build_sessions(vec![click(1, 10, 3), click(1, 10, 1), click(1, 5, 2)]);
        assert_eq!(s[0].items().collect::<Vec<_>>(), vec![2, 3, 1]);
    }

    #[test]
    fn vocab_first_appearance() {
        let s = build_sessions(vec![click(1, 1, 7), click(1, 2, 3), click(1, 3, 7), click(1, 4, 9)]);
        let v = build_vocab(&s, 3600).unwrap();
        assert_eq!(v.index_of(7), Some(0));
        assert_eq!(v.index_of(3), Some(1));
        assert_eq!(v.index_of(9), Some(2));
        assert_eq!(v.dwell_bucket_count, 3601);
        assert!(matches!(build_vocab(&[], 10), Err(Error::EmptyVocab)));
    }

    #[test]
    fn vocab_file_round_trip() {
        let s = build_sessions(vec![click(1, 1, 70), click(1, 2, 3), click(2, 3, 12)]);
        let v = build_vocab(&s, 60).unwrap();
        let bytes = v.to_bytes();
        assert!(bytes.starts_with(b"dwell_buckets=61\n70\t0\n"));
        let back = Vocab::read(bytes.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);
    }
}
