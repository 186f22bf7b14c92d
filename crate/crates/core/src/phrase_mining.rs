//! Frequent n-gram mining over annotated sentences.
//!
//! Candidates are runs of 2 to 4 consecutive non-punctuation tokens whose first
//! and last tokens carry an interesting part of speech. Counting happens per
//! partition (one data file each); a partition contributes to the total only
//! where its own count reaches `partition_min`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Pos, Sentence, Token};

pub const MIN_NGRAM: usize = 2;
pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("partition_min ({partition_min}) exceeds global_min ({global_min})")]
    Thresholds { global_min: u64, partition_min: u64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed n-gram record")]
    Parse { line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    pub global_min: u64,
    pub partition_min: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            global_min: 100,
            partition_min: 5,
        }
    }
}

/// Mined n-grams (lemmas joined by `_`) with their thresholded totals.
pub type Phrases = BTreeMap<String, u64>;

fn is_boundary(t: &Token) -> bool {
    t.pos.is_interesting()
}

/// Every qualifying n-gram occurrence in a sentence, overlapping occurrences
/// included, as (start token index, length).
pub fn ngram_spans(tokens: &[Token]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for start in 0..tokens.len() {
        if !is_boundary(&tokens[start]) {
            continue;
        }
        for len in MIN_NGRAM..=MAX_NGRAM {
            let end = start + len;
            if end > tokens.len() {
                break;
            }
            if tokens[start..end].iter().any(|t| t.pos == Pos::Punct) {
                break;
            }
            if is_boundary(&tokens[end - 1]) {
                out.push((start, len));
            }
        }
    }
    out
}

fn ngram_string(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.lemma.as_str())
        .collect::<Vec<_>>()
        .join("_")
}

/// Raw counts for one partition.
pub fn count_partition(sentences: &[Sentence]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for s in sentences {
        for (start, len) in ngram_spans(&s.tokens) {
            *counts
                .entry(ngram_string(&s.tokens[start..start + len]))
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Mines n-grams across partitions with both support thresholds.
pub fn mine<P>(partitions: &[P], config: MiningConfig) -> Result<Phrases, MiningError>
where
    P: AsRef<[Sentence]> + Sync,
{
    if config.partition_min > config.global_min {
        return Err(MiningError::Thresholds {
            global_min: config.global_min,
            partition_min: config.partition_min,
        });
    }
    let per_partition: Vec<HashMap<String, u64>> = partitions
        .par_iter()
        .map(|p| {
            let mut c = count_partition(p.as_ref());
            c.retain(|_, n| *n >= config.partition_min);
            c
        })
        .collect();
    let mut totals: HashMap<String, u64> = HashMap::new();
    for counts in per_partition {
        for (k, n) in counts {
            *totals.entry(k).or_insert(0) += n;
        }
    }
    Ok(totals
        .into_iter()
        .filter(|(_, n)| *n >= config.global_min)
        .collect())
}

/// Mined n-grams that occur in `sentence`, deduplicated and sorted.
pub fn ngrams_in(sentence: &Sentence, phrases: &Phrases) -> BTreeSet<String> {
    ngram_spans(&sentence.tokens)
        .into_iter()
        .map(|(start, len)| ngram_string(&sentence.tokens[start..start + len]))
        .filter(|g| phrases.contains_key(g))
        .collect()
}

/// One `ngram\tcount` line per phrase, sorted by phrase.
pub fn write_phrases(w: &mut dyn Write, phrases: &Phrases) -> io::Result<()> {
    for (g, n) in phrases {
        writeln!(w, "{g}\t{n}")?;
    }
    Ok(())
}

pub fn read_phrases<R: BufRead>(r: R) -> Result<Phrases, MiningError> {
    let mut out = Phrases::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (g, n) = line.split_once('\t').ok_or(MiningError::Parse { line: i + 1 })?;
        let n = n.parse().map_err(|_| MiningError::Parse { line: i + 1 })?;
        out.insert(g.to_string(), n);
    }
    Ok(out)
}
