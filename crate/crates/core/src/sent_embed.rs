//! Hashed random-projection sentence vectors.
//!
//! Each lemma owns a pseudorandom sign vector with entries in
//! {-1/sqrt(d), +1/sqrt(d)}, seeded by a hash of (lemma, seed). A sentence is
//! the L2-normalised mean of its non-punctuation token vectors, so sentences
//! sharing lemmas land close together.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Pos, Sentence};
use crate::graph::{NodeKey, NodeKind};
use crate::util;

pub const MIN_DIM: usize = 8;
const MAGIC: &[u8; 8] = b"SVECF32\x01";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding dimension {0} is below the minimum of {MIN_DIM}")]
    DimTooSmall(usize),
    #[error("vector file: {0}")]
    Io(#[from] io::Error),
    #[error("vector file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector {
    pub key: NodeKey,
    pub values: Vec<f32>,
    /// Set when the sentence had no non-punctuation tokens; `values` is zero.
    pub empty: bool,
}

fn lemma_vector(lemma: &str, dim: usize, seed: u64, out: &mut [f64]) {
    let mut bytes = Vec::with_capacity(lemma.len() + 8);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(lemma.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(util::fnv1a64(&bytes));
    let scale = 1.0 / (dim as f64).sqrt();
    for v in out.iter_mut() {
        *v = if rng.gen::<bool>() { scale } else { -scale };
    }
}

/// Sentence vector as a function of the token lemmas, `dim` and `seed`.
pub fn embed(sentence: &Sentence, dim: usize, seed: u64) -> Result<SentenceVector, EmbedError> {
    if dim < MIN_DIM {
        return Err(EmbedError::DimTooSmall(dim));
    }
    let key = NodeKey::new(NodeKind::Sentence, sentence.node_name());
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in sentence.tokens.iter().filter(|t| t.pos != Pos::Punct) {
        *counts.entry(t.lemma.as_str()).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Ok(SentenceVector {
            key,
            values: vec![0.0; dim],
            empty: true,
        });
    }
    // Summation order is fixed so the result does not depend on hash order.
    let mut lemmas: Vec<(&str, usize)> = counts.into_iter().collect();
    lemmas.sort_unstable();
    let mut acc = vec![0.0f64; dim];
    let mut tmp = vec![0.0f64; dim];
    for (lemma, n) in lemmas {
        lemma_vector(lemma, dim, seed, &mut tmp);
        for (a, t) in acc.iter_mut().zip(&tmp) {
            *a += *t * n as f64;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        acc.iter().map(|v| (v / norm) as f32).collect()
    } else {
        vec![0.0; dim]
    };
    Ok(SentenceVector {
        key,
        values,
        empty: norm == 0.0,
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Binary layout: magic, dim (u32), count (u64), then count x dim f32 values,
/// all little-endian. Keys go to a sidecar, one per line.
pub fn write_vectors(
    data: &mut dyn Write,
    keys: &mut dyn Write,
    vectors: &[SentenceVector],
) -> Result<(), EmbedError> {
    let dim = vectors.first().map_or(0, |v| v.values.len());
    if vectors.iter().any(|v| v.values.len() != dim) {
        return Err(EmbedError::Format("mixed dimensions".into()));
    }
    data.write_all(MAGIC)?;
    util::write_u32(data, dim as u32)?;
    util::write_u64(data, vectors.len() as u64)?;
    for v in vectors {
        util::write_f32s(data, v.values.iter().copied())?;
        writeln!(keys, "{}", v.key)?;
    }
    Ok(())
}

pub fn read_vectors<R: Read, K: BufRead>(
    mut data: R,
    keys: K,
) -> Result<Vec<SentenceVector>, EmbedError> {
    util::expect_magic(&mut data, MAGIC)?;
    let dim = util::read_u32(&mut data)? as usize;
    let count = util::read_u64(&mut data)? as usize;
    let keys: Vec<String> = keys.lines().collect::<Result<_, _>>()?;
    if keys.len() != count {
        return Err(EmbedError::Format(format!(
            "{count} vectors but {} keys",
            keys.len()
        )));
    }
    keys.into_iter()
        .map(|k| {
            let key: NodeKey = k.parse().map_err(|e| EmbedError::Format(format!("{e}")))?;
            let values = util::read_f32s(&mut data, dim)?;
            let empty = values.iter().all(|v| *v == 0.0);
            Ok(SentenceVector { key, values, empty })
        })
        .collect()
}
