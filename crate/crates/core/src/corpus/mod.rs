//! Repost streams, the JSONL dataset format, interval partitioning and
//! train/validation/test splitting.
//!
//! One line of a dataset file holds one stream:
//!
//! ```text
//! {"id":"a","label":1,"text":"claim","reposts":[{"t":5,"text":"fake!"},{"t":2,"text":"rt"}]}
//! ```

mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};

pub use synth::{generate_synthetic, generate_synthetic_with_meta, GeneratorParams, StanceMix, SyntheticCorpus};

/// Default number of consecutive reposts merged into one interval.
pub const DEFAULT_INTERVAL_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repost {
    #[serde(rename = "t")]
    pub timestamp: u64,
    pub text: String,
}

/// An original message, its reposts in time order and the gold label
/// (`1` = rumor).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepostStream {
    pub id: String,
    pub label: u8,
    #[serde(rename = "text")]
    pub original_text: String,
    pub reposts: Vec<Repost>,
}

impl RepostStream {
    /// Builds a stream, stable-sorting reposts by timestamp.
    pub fn new(
        id: impl Into<String>,
        label: u8,
        original_text: impl Into<String>,
        mut reposts: Vec<Repost>,
    ) -> Result<Self> {
        if label > 1 {
            return Err(CedError::invalid(format!("label must be 0 or 1, got {label}")));
        }
        if reposts.is_empty() {
            return Err(CedError::invalid("stream has no reposts"));
        }
        reposts.sort_by_key(|r| r.timestamp);
        Ok(Self {
            id: id.into(),
            label,
            original_text: original_text.into(),
            reposts,
        })
    }

    pub fn is_rumor(&self) -> bool {
        self.label == 1
    }

    /// Number of intervals this stream forms at interval size `n`.
    pub fn num_intervals(&self, n: usize) -> usize {
        self.reposts.len().div_ceil(n.max(1))
    }
}

/// A stream cut into runs of at most `interval_size` consecutive reposts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalSequence {
    pub stream_id: String,
    pub label: u8,
    pub intervals: Vec<Vec<Repost>>,
    pub interval_size: usize,
}

impl IntervalSequence {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Concatenation of all intervals, i.e. the original repost list.
    pub fn flatten(&self) -> Vec<Repost> {
        self.intervals.iter().flatten().cloned().collect()
    }
}

/// Cuts a stream into intervals of `n` reposts; the last one may be short.
pub fn partition(stream: &RepostStream, n: usize) -> Result<IntervalSequence> {
    if n == 0 {
        return Err(CedError::invalid("interval size must be at least 1"));
    }
    if stream.reposts.is_empty() {
        return Err(CedError::invalid(format!("stream {} has no reposts", stream.id)));
    }
    Ok(IntervalSequence {
        stream_id: stream.id.clone(),
        label: stream.label,
        intervals: stream.reposts.chunks(n).map(<[Repost]>::to_vec).collect(),
        interval_size: n,
    })
}

#[derive(Deserialize)]
struct RawRepost {
    t: i64,
    text: String,
}

#[derive(Deserialize)]
struct RawStream {
    id: String,
    label: i64,
    text: String,
    reposts: Vec<RawRepost>,
}

/// Result of reading a dataset file.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub streams: Vec<RepostStream>,
    /// Lines whose stream had no reposts.
    pub skipped_empty: usize,
}

/// Reads a JSONL dataset. Streams keep file order; streams without reposts
/// are dropped and counted.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CedError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CedError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawStream = serde_json::from_str(&line).map_err(|e| CedError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.label != 0 && raw.label != 1 {
            return Err(CedError::InvalidLabel {
                line: line_no,
                label: raw.label,
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(CedError::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        if raw.reposts.is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        let mut reposts = Vec::with_capacity(raw.reposts.len());
        for r in raw.reposts {
            if r.t < 0 {
                return Err(CedError::MalformedLine {
                    line: line_no,
                    message: format!("negative timestamp {}", r.t),
                });
            }
            reposts.push(Repost {
                timestamp: r.t as u64,
                text: r.text,
            });
        }
        out.streams
            .push(RepostStream::new(raw.id, raw.label as u8, raw.text, reposts)?);
    }
    if out.skipped_empty > 0 {
        log::warn!(
            "{}: skipped {} stream(s) without reposts",
            path.display(),
            out.skipped_empty
        );
    }
    Ok(out)
}

/// Writes streams in the same JSONL schema `ingest_jsonl` reads.
pub fn write_jsonl(path: impl AsRef<Path>, streams: &[RepostStream]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in streams {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| CedError::io(path, e))?;
    file.write_all(&buf).map_err(|e| CedError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Split sizes for `n` items: validation is `round(val_frac * n)`, test is
/// `floor(rest / (ratio + 1))` and train takes the remainder.
pub fn split_sizes(n: usize, val_frac: f64, train_test_ratio: f64) -> Result<(usize, usize, usize)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(CedError::invalid(format!("val_frac must be in (0,1), got {val_frac}")));
    }
    if !(train_test_ratio > 0.0 && train_test_ratio.is_finite()) {
        return Err(CedError::invalid(format!(
            "train_test_ratio must be positive, got {train_test_ratio}"
        )));
    }
    if n < 4 {
        return Err(CedError::invalid(format!("need at least 4 streams to split, got {n}")));
    }
    let val = (val_frac * n as f64).round() as usize;
    let rest = n.saturating_sub(val);
    let test = (rest as f64 / (train_test_ratio + 1.0)).floor() as usize;
    let train = rest - test;
    if val == 0 || test == 0 || train == 0 {
        return Err(CedError::invalid(format!(
            "{n} streams give an empty split (train {train}, validation {val}, test {test})"
        )));
    }
    Ok((train, val, test))
}

/// Seeded random split of stream ids.
pub fn split_dataset(
    streams: &[RepostStream],
    seed: u64,
    val_frac: f64,
    train_test_ratio: f64,
) -> Result<DatasetSplit> {
    let (_, n_val, n_test) = split_sizes(streams.len(), val_frac, train_test_ratio)?;
    let mut ids: Vec<String> = streams.iter().map(|s| s.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train = ids.split_off(n_val + n_test);
    let test = ids.split_off(n_val);
    Ok(DatasetSplit {
        train,
        validation: ids,
        test,
    })
}

/// Picks the streams named by `ids`, in `ids` order.
pub fn select<'a>(streams: &'a [RepostStream], ids: &[String]) -> Result<Vec<&'a RepostStream>> {
    let index: std::collections::HashMap<&str, &RepostStream> = streams.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| CedError::invalid(format!("unknown stream id {id:?}")))
        })
        .collect()
}
