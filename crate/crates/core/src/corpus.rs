//! Corpus ingestion: JSON-lines loading with pair-level deduplication,
//! seeded 80/10/10 splitting and length statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::surface_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub code: String,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    /// Parallel to `samples`; empty until the corpus is split.
    pub split: Vec<Split>,
}

#[derive(Deserialize)]
struct RawRecord {
    code: Option<String>,
    comment: Option<String>,
    split: Option<Split>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: u32,
    code: &'a str,
    comment: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Corpus {
    /// Builds a corpus from raw pairs, dropping exact duplicates of the
    /// whitespace-normalized `(code, comment)` pair. First occurrences keep
    /// their order and ids are assigned sequentially.
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut samples = Vec::new();
        for (code, comment) in pairs {
            let code = code.as_ref().trim();
            let comment = comment.as_ref().trim();
            if code.is_empty() || comment.is_empty() {
                continue;
            }
            if seen.insert((normalize_ws(code), normalize_ws(comment))) {
                samples.push(Sample {
                    id: samples.len() as u32,
                    code: code.to_string(),
                    comment: comment.to_string(),
                });
            }
        }
        Corpus {
            samples,
            split: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_split(&self) -> bool {
        !self.split.is_empty() && self.split.len() == self.samples.len()
    }

    /// Samples carrying the given label, in corpus order.
    pub fn part(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, &s)| s == which)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn get(&self, id: u32) -> Option<&Sample> {
        match self.samples.get(id as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.samples.iter().find(|s| s.id == id),
        }
    }

    /// Writes one JSON object per line, including the split label when set.
    pub fn write_jsonl<W: Write>(&self, mut w: W, only: Option<Split>) -> std::io::Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let split = self.split.get(i).copied();
            if only.is_some() && split != only {
                continue;
            }
            let rec = OutRecord {
                id: s.id,
                code: &s.code,
                comment: &s.comment,
                split,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loads a JSON-lines corpus (`{"code": .., "comment": ..}` per line) and
/// deduplicates it. A `split` field, when present on every record, is kept.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let code = rec.code.unwrap_or_default();
        let comment = rec.comment.unwrap_or_default();
        if code.trim().is_empty() {
            return Err(malformed("missing or empty \"code\"".into()));
        }
        if comment.trim().is_empty() {
            return Err(malformed("missing or empty \"comment\"".into()));
        }
        pairs.push((code, comment));
        splits.push(rec.split);
    }

    let mut corpus = Corpus::from_pairs(pairs.iter().map(|(a, b)| (a, b)));
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if splits.iter().all(Option::is_some) {
        // Map each surviving sample back to its first occurrence's label.
        let mut seen = HashSet::new();
        let mut labels = Vec::with_capacity(corpus.len());
        for ((code, comment), split) in pairs.iter().zip(&splits) {
            let key = (normalize_ws(code), normalize_ws(comment));
            if seen.insert(key) {
                labels.push(split.unwrap());
            }
        }
        corpus.split = labels;
    }
    Ok(corpus)
}

/// Split sizes for `n` samples: floor(0.8n) / floor(0.1n) / remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let valid = n / 10;
    (train, valid, n - train - valid)
}

/// Assigns train/valid/test labels from a seeded random permutation.
pub fn split_corpus(mut corpus: Corpus, seed: u64) -> Result<Corpus> {
    let n = corpus.len();
    if n < 3 {
        return Err(Error::CorpusTooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, valid, _) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < train {
            Split::Train
        } else if rank < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    corpus.split = split;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub average: f64,
    pub mode: usize,
    pub median: f64,
    pub cdf16: f64,
    pub cdf32: f64,
    pub cdf48: f64,
}

impl LengthStats {
    /// Statistics over a list of token counts. Mode ties go to the shorter
    /// length; the median of an even-sized list is the mean of the middle two.
    pub fn from_lengths(lengths: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let n = lengths.len() as f64;
        let average = lengths.iter().sum::<usize>() as f64 / n;
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in lengths {
            *hist.entry(l).or_default() += 1;
        }
        let mode = hist
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(&l, _)| l)
            .unwrap();
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2] as f64
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
        };
        let below = |t: usize| lengths.iter().filter(|&&l| l < t).count() as f64 / n;
        Some(LengthStats {
            average,
            mode,
            median,
            cdf16: below(16),
            cdf32: below(32),
            cdf48: below(48),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub code: LengthStats,
    pub comment: LengthStats,
}

/// Length statistics over surface-token counts of codes and comments.
pub fn compute_stats(corpus: &Corpus) -> Result<CorpusStats> {
    let code: Vec<usize> = corpus
        .samples
        .iter()
        .map(|s| surface_tokens(&s.code).len())
        .collect();
    let comment: Vec<usize> = corpus
        .samples
        .iter()
        .map(|s| surface_tokens(&s.comment).len())
        .collect();
    Ok(CorpusStats {
        samples: corpus.len(),
        code: LengthStats::from_lengths(&code).ok_or(Error::EmptyCorpus)?,
        comment: LengthStats::from_lengths(&comment).ok_or(Error::EmptyCorpus)?,
    })
}
