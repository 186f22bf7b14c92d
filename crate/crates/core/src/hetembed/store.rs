use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};

use rand::Rng;
use thiserror::Error;

use super::score_raw;
use crate::graph::{NodeKey, NodeKind, ALLOWED_EDGE_KINDS};
use crate::util::{
    expect_magic, read_f32s, read_str, read_u32, read_u64, read_u8, seeded_rng, write_f32s,
    write_str, write_u32, write_u64, write_u8,
};

const MAGIC: &[u8; 8] = b"HETEMB\0\x01";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("node {0} has no embedding")]
    MissingNode(NodeKey),
    #[error("no translation for {0} -> {1}")]
    MissingTranslation(NodeKind, NodeKind),
    #[error("bad store file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    keys: Vec<NodeKey>,
    index: HashMap<NodeKey, usize>,
    table: Vec<f64>,
    translations: BTreeMap<(NodeKind, NodeKind), Vec<f64>>,
}

impl EmbeddingStore {
    /// Uniform(-1/sqrt(N), 1/sqrt(N)) embeddings and zero translations for
    /// every allowed edge-kind pair in both directions.
    pub fn init(keys: Vec<NodeKey>, dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "embedding dimension must be at least 2");
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = seeded_rng(seed, "hetembed-init");
        let table = (0..keys.len() * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let mut translations = BTreeMap::new();
        for (a, b) in ALLOWED_EDGE_KINDS {
            translations.insert((*a, *b), vec![0.0; dim]);
            translations.insert((*b, *a), vec![0.0; dim]);
        }
        Self::from_parts(dim, keys, table, translations)
    }

    pub(super) fn from_parts(
        dim: usize,
        keys: Vec<NodeKey>,
        table: Vec<f64>,
        translations: BTreeMap<(NodeKind, NodeKind), Vec<f64>>,
    ) -> Self {
        let index = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        Self {
            dim,
            keys,
            index,
            table,
            translations,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[NodeKey] {
        &self.keys
    }

    pub fn index_of(&self, key: &NodeKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn get(&self, key: &NodeKey) -> Option<&[f64]> {
        self.index_of(key).map(|i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    pub(super) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.table[i * self.dim..(i + 1) * self.dim]
    }

    pub(super) fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn set(&mut self, key: &NodeKey, values: &[f64]) -> Result<(), StoreError> {
        let i = self
            .index_of(key)
            .ok_or_else(|| StoreError::MissingNode(key.clone()))?;
        self.row_mut(i).copy_from_slice(values);
        Ok(())
    }

    pub fn translation(&self, a: NodeKind, b: NodeKind) -> Option<&[f64]> {
        self.translations.get(&(a, b)).map(Vec::as_slice)
    }

    pub fn translation_mut(&mut self, a: NodeKind, b: NodeKind) -> Option<&mut Vec<f64>> {
        self.translations.get_mut(&(a, b))
    }

    pub fn translations(&self) -> &BTreeMap<(NodeKind, NodeKind), Vec<f64>> {
        &self.translations
    }

    pub fn score(&self, i: &NodeKey, j: &NodeKey) -> Result<f64, StoreError> {
        let ei = self.get(i).ok_or_else(|| StoreError::MissingNode(i.clone()))?;
        let ej = self.get(j).ok_or_else(|| StoreError::MissingNode(j.clone()))?;
        let t = self
            .translation(i.kind(), j.kind())
            .ok_or(StoreError::MissingTranslation(i.kind(), j.kind()))?;
        Ok(score_raw(ei, ej, t))
    }

    pub fn is_finite(&self) -> bool {
        self.table.iter().all(|x| x.is_finite())
            && self.translations.values().flatten().all(|x| x.is_finite())
    }

    /// Writes values as float32; reading back yields the rounded values.
    pub fn write(&self, w: &mut dyn Write) -> Result<(), StoreError> {
        w.write_all(MAGIC)?;
        write_u32(w, self.dim as u32)?;
        write_u64(w, self.keys.len() as u64)?;
        for k in &self.keys {
            write_str(w, &k.to_string())?;
        }
        write_f32s(w, self.table.iter().map(|x| *x as f32))?;
        write_u32(w, self.translations.len() as u32)?;
        for ((a, b), t) in &self.translations {
            write_u8(w, a.code())?;
            write_u8(w, b.code())?;
            write_f32s(w, t.iter().map(|x| *x as f32))?;
        }
        Ok(())
    }

    pub fn read(r: &mut dyn Read) -> Result<Self, StoreError> {
        expect_magic(r, MAGIC)?;
        let dim = read_u32(r)? as usize;
        if dim < 2 {
            return Err(StoreError::Format(format!("dimension {dim}")));
        }
        let count = read_u64(r)? as usize;
        let mut keys = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let key: NodeKey = read_str(r)?
                .parse()
                .map_err(|e| StoreError::Format(format!("{e}")))?;
            keys.push(key);
        }
        let table = read_f32s(r, count * dim)?.into_iter().map(f64::from).collect();
        let tcount = read_u32(r)?;
        let mut translations = BTreeMap::new();
        for _ in 0..tcount {
            let kind = |c: u8| {
                NodeKind::from_code(c).ok_or_else(|| StoreError::Format(format!("kind code {c}")))
            };
            let a = kind(read_u8(r)?)?;
            let b = kind(read_u8(r)?)?;
            let t = read_f32s(r, dim)?.into_iter().map(f64::from).collect();
            translations.insert((a, b), t);
        }
        let store = Self::from_parts(dim, keys, table, translations);
        if store.index.len() != store.keys.len() {
            return Err(StoreError::Format("duplicate keys".into()));
        }
        if !store.is_finite() {
            return Err(StoreError::Format("non-finite values".into()));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize) -> Vec<NodeKey> {
        (0..n)
            .map(|i| NodeKey::new(NodeKind::ALL[i % 6], format!("n{i}")))
            .collect()
    }

    #[test]
    fn init_bounds_and_translations() {
        let s = EmbeddingStore::init(keys(50), 16, 3);
        assert!(s.table.iter().all(|x| x.abs() <= 0.25));
        for (a, b) in ALLOWED_EDGE_KINDS {
            assert!(s.translation(*a, *b).unwrap().iter().all(|x| *x == 0.0));
            assert!(s.translation(*b, *a).is_some());
        }
    }

    #[test]
    fn zero_translation_score_is_symmetric() {
        let mut rng = seeded_rng(1, "t");
        let ks = keys(60);
        let s = EmbeddingStore::init(ks.clone(), 8, 1);
        for _ in 0..100 {
            let a = &ks[rng.gen_range(0..ks.len())];
            let b = &ks[rng.gen_range(0..ks.len())];
            if s.translation(a.kind(), b.kind()).is_none() {
                continue;
            }
            // Oracle: direct evaluation of the bilinear form.
            let (ea, eb) = (s.get(a).unwrap(), s.get(b).unwrap());
            let direct: f64 = ea[0] + eb[0] + (1..8).map(|k| ea[k] * eb[k]).sum::<f64>();
            assert!((s.score(a, b).unwrap() - direct).abs() < 1e-12);
            assert!((s.score(a, b).unwrap() - s.score(b, a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn translations_break_symmetry() {
        let ks = vec![
            NodeKey::new(NodeKind::Sentence, "a:0"),
            NodeKey::new(NodeKind::Lemma, "x"),
        ];
        let mut s = EmbeddingStore::init(ks.clone(), 4, 2);
        s.translation_mut(NodeKind::Sentence, NodeKind::Lemma).unwrap()[1] = 5.0;
        assert_ne!(s.score(&ks[0], &ks[1]).unwrap(), s.score(&ks[1], &ks[0]).unwrap());
    }

    #[test]
    fn missing_node_is_error() {
        let s = EmbeddingStore::init(keys(3), 4, 0);
        let ghost = NodeKey::new(NodeKind::Lemma, "ghost");
        assert!(matches!(s.score(&ghost, &s.keys()[0].clone()), Err(StoreError::MissingNode(_))));
    }

    #[test]
    fn file_roundtrip() {
        let s = EmbeddingStore::init(keys(40), 8, 5);
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        let back = EmbeddingStore::read(&mut &buf[..]).unwrap();
        assert_eq!(back.keys(), s.keys());
        for (a, b) in back.table.iter().zip(&s.table) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        assert_eq!(back.translations, s.translations);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(EmbeddingStore::read(&mut &buf[..buf.len() - 2]).is_err());
    }
}
