use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{BuildHasherDefault, Hasher};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::store::{EmbeddingStore, StoreError};
use super::{log_sum_exp, score_raw};
use crate::graph::{NodeKey, NodeKind, SemanticGraph};
use crate::util::{fnv1a64, seeded_rng};

const ADAGRAD_EPS: f64 = 1e-10;
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("training diverged at epoch {epoch}, bucket {bucket:?}: loss {loss}")]
    Diverged {
        epoch: usize,
        bucket: (usize, usize),
        loss: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub partitions: usize,
    pub k_batch: usize,
    pub k_part: usize,
    pub seed: u64,
    /// Record which partitions each bucket step touched.
    pub log_buckets: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            epochs: 10,
            lr: 0.1,
            batch_size: 1000,
            partitions: 1,
            k_batch: 50,
            k_part: 50,
            seed: 0,
            log_buckets: false,
        }
    }
}

/// Corrupted (source, destination) pairs for one positive edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeBatch {
    pub pairs: Vec<(NodeKey, NodeKey)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketUpdate {
    pub epoch: usize,
    pub bucket: (usize, usize),
    pub source_partitions: BTreeSet<usize>,
    pub destination_partitions: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub fallback_draws: u64,
    pub buckets: Vec<BucketUpdate>,
}

pub fn partition_of(key: &NodeKey, partitions: usize) -> usize {
    (fnv1a64(key.to_string().as_bytes()) % partitions as u64) as usize
}

struct KindPools<T> {
    by_kind: [Vec<T>; 6],
}

impl<T: Clone> KindPools<T> {
    fn new(items: impl IntoIterator<Item = (NodeKind, T)>) -> Self {
        let mut by_kind: [Vec<T>; 6] = Default::default();
        for (kind, item) in items {
            by_kind[kind.code() as usize].push(item);
        }
        Self { by_kind }
    }

    fn draw<R: Rng>(&self, kind: NodeKind, rng: &mut R) -> Option<T> {
        self.by_kind[kind.code() as usize].choose(rng).cloned()
    }
}

struct SidePools<'a, T> {
    batch: &'a KindPools<T>,
    partition: &'a KindPools<T>,
}

/// Draws `k_batch` replacements from the batch pools and `k_part` from the
/// partition pools. Each draw corrupts one endpoint, chosen uniformly, with a
/// node of the same kind taken from that endpoint's side.
#[allow(clippy::too_many_arguments)]
fn draw_negatives<T: Clone, R: Rng>(
    src: (NodeKind, &T),
    dst: (NodeKind, &T),
    src_pools: &SidePools<T>,
    dst_pools: &SidePools<T>,
    global: &KindPools<T>,
    k_batch: usize,
    k_part: usize,
    rng: &mut R,
    fallbacks: &mut u64,
) -> Vec<(T, T)> {
    let mut out = Vec::with_capacity(k_batch + k_part);
    for n in 0..k_batch + k_part {
        let corrupt_src = rng.gen_bool(0.5);
        let (kind, side) = if corrupt_src { (src.0, src_pools) } else { (dst.0, dst_pools) };
        let pool = if n < k_batch { side.batch } else { side.partition };
        let node = match pool.draw(kind, rng) {
            Some(node) => node,
            None => {
                *fallbacks += 1;
                global
                    .draw(kind, rng)
                    .expect("global pool contains the positive endpoint")
            }
        };
        out.push(if corrupt_src {
            (node, dst.1.clone())
        } else {
            (src.1.clone(), node)
        });
    }
    out
}

/// Samples negatives for `edge`. Source replacements come from batch sources
/// and `src_partition`; destination replacements from batch destinations and
/// `dst_partition`. Empty pools fall back to `global`.
#[allow(clippy::too_many_arguments)]
pub fn sample_negatives<R: Rng>(
    edge: &(NodeKey, NodeKey),
    batch: &[(NodeKey, NodeKey)],
    src_partition: &[NodeKey],
    dst_partition: &[NodeKey],
    global: &[NodeKey],
    k_batch: usize,
    k_part: usize,
    rng: &mut R,
) -> NegativeBatch {
    let pools = |it: &mut dyn Iterator<Item = &NodeKey>| KindPools::new(it.map(|k| (k.kind(), k.clone())));
    let batch_src = pools(&mut batch.iter().map(|e| &e.0));
    let batch_dst = pools(&mut batch.iter().map(|e| &e.1));
    let part_src = pools(&mut src_partition.iter());
    let part_dst = pools(&mut dst_partition.iter());
    let mut global_pool = pools(&mut global.iter());
    for key in [&edge.0, &edge.1] {
        let slot = &mut global_pool.by_kind[key.kind().code() as usize];
        if slot.is_empty() {
            slot.push(key.clone());
        }
    }
    let mut fallbacks = 0;
    let pairs = draw_negatives(
        (edge.0.kind(), &edge.0),
        (edge.1.kind(), &edge.1),
        &SidePools { batch: &batch_src, partition: &part_src },
        &SidePools { batch: &batch_dst, partition: &part_dst },
        &global_pool,
        k_batch,
        k_part,
        rng,
        &mut fallbacks,
    );
    if fallbacks > 0 {
        warn!("{fallbacks} negative draws fell back to the global pool");
    }
    NegativeBatch { pairs }
}

/// Multiplicative hash for dense row indices.
#[derive(Debug, Default, Clone, Copy)]
pub struct IndexHasher(u64);

impl Hasher for IndexHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn write_usize(&mut self, i: usize) {
        self.0 = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

pub type RowMap = HashMap<usize, Vec<f64>, BuildHasherDefault<IndexHasher>>;

/// Sparse gradient of the loss with respect to store parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub nodes: RowMap,
    pub translations: BTreeMap<(NodeKind, NodeKind), Vec<f64>>,
}

impl Gradient {
    fn node(&mut self, i: usize, dim: usize) -> &mut Vec<f64> {
        self.nodes.entry(i).or_insert_with(|| vec![0.0; dim])
    }

    /// Adds `w * d score(i, j) / d params`; the translation part goes to
    /// `gt`.
    fn add_score_grad(&mut self, store: &EmbeddingStore, i: usize, j: usize, t: &[f64], gt: &mut [f64], w: f64) {
        let dim = store.dim();
        let (ei, ej) = (store.row(i), store.row(j));
        let gi = self.node(i, dim);
        gi[0] += w;
        for k in 1..dim {
            gi[k] += w * (ej[k] + t[k]);
        }
        let gj = self.node(j, dim);
        gj[0] += w;
        for k in 1..dim {
            gj[k] += w * ei[k];
        }
        gt[0] += w;
        for k in 1..dim {
            gt[k] += w * ei[k];
        }
    }

    fn merge(&mut self, other: Gradient) {
        for (i, g) in other.nodes {
            match self.nodes.get_mut(&i) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.nodes.insert(i, g);
                }
            }
        }
        for (kinds, g) in other.translations {
            match self.translations.get_mut(&kinds) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.translations.insert(kinds, g);
                }
            }
        }
    }
}

fn indexed_loss(
    store: &EmbeddingStore,
    edge: (usize, usize),
    kinds: (NodeKind, NodeKind),
    negatives: &[(usize, usize)],
    grad: Option<&mut Gradient>,
) -> f64 {
    let t = store.translation(kinds.0, kinds.1).expect("translation checked");
    let pos = score_raw(store.row(edge.0), store.row(edge.1), t);
    let neg: Vec<f64> = negatives
        .iter()
        .map(|(x, y)| score_raw(store.row(*x), store.row(*y), t))
        .collect();
    let lse = log_sum_exp(&neg);
    if let Some(grad) = grad {
        let mut gt = vec![0.0; store.dim()];
        grad.add_score_grad(store, edge.0, edge.1, t, &mut gt, -1.0);
        for ((x, y), s) in negatives.iter().zip(&neg) {
            grad.add_score_grad(store, *x, *y, t, &mut gt, (s - lse).exp());
        }
        match grad.translations.get_mut(&kinds) {
            Some(acc) => acc.iter_mut().zip(gt).for_each(|(a, b)| *a += b),
            None => {
                grad.translations.insert(kinds, gt);
            }
        }
    }
    -pos + lse
}

fn resolve(
    store: &EmbeddingStore,
    edge: &(NodeKey, NodeKey),
    negatives: &NegativeBatch,
) -> Result<((usize, usize), (NodeKind, NodeKind), Vec<(usize, usize)>), StoreError> {
    let idx = |k: &NodeKey| store.index_of(k).ok_or_else(|| StoreError::MissingNode(k.clone()));
    let kinds = (edge.0.kind(), edge.1.kind());
    if store.translation(kinds.0, kinds.1).is_none() {
        return Err(StoreError::MissingTranslation(kinds.0, kinds.1));
    }
    let mut negs = Vec::with_capacity(negatives.pairs.len());
    for (x, y) in &negatives.pairs {
        if (x.kind(), y.kind()) != kinds {
            return Err(StoreError::MissingTranslation(x.kind(), y.kind()));
        }
        negs.push((idx(x)?, idx(y)?));
    }
    Ok(((idx(&edge.0)?, idx(&edge.1)?), kinds, negs))
}

/// `-score(edge) + log sum_n exp(score(negative_n))`.
pub fn edge_loss(store: &EmbeddingStore, edge: &(NodeKey, NodeKey), negatives: &NegativeBatch) -> Result<f64, StoreError> {
    let (e, kinds, negs) = resolve(store, edge, negatives)?;
    Ok(indexed_loss(store, e, kinds, &negs, None))
}

pub fn edge_loss_grad(
    store: &EmbeddingStore,
    edge: &(NodeKey, NodeKey),
    negatives: &NegativeBatch,
) -> Result<(f64, Gradient), StoreError> {
    let (e, kinds, negs) = resolve(store, edge, negatives)?;
    let mut grad = Gradient::default();
    let loss = indexed_loss(store, e, kinds, &negs, Some(&mut grad));
    Ok((loss, grad))
}

struct Adagrad {
    lr: f64,
    nodes: Vec<f64>,
    translations: BTreeMap<(NodeKind, NodeKind), Vec<f64>>,
}

fn adagrad_step(lr: f64, x: &mut [f64], acc: &mut [f64], g: &[f64]) {
    for ((x, a), g) in x.iter_mut().zip(acc.iter_mut()).zip(g) {
        *a += g * g;
        *x -= lr * g / (a.sqrt() + ADAGRAD_EPS);
    }
}

impl Adagrad {
    fn apply(&mut self, store: &mut EmbeddingStore, grad: &Gradient) {
        let dim = store.dim();
        for (i, g) in &grad.nodes {
            let acc = &mut self.nodes[i * dim..(i + 1) * dim];
            adagrad_step(self.lr, store.row_mut(*i), acc, g);
        }
        for (kinds, g) in &grad.translations {
            let acc = self
                .translations
                .entry(*kinds)
                .or_insert_with(|| vec![0.0; dim]);
            let t = store.translation_mut(kinds.0, kinds.1).expect("translation exists");
            adagrad_step(self.lr, t, acc, g);
        }
    }
}

fn edge_seed(seed: u64, epoch: usize, bucket: usize, batch: usize, chunk: usize) -> u64 {
    let mut bytes = Vec::with_capacity(40);
    for v in [seed, epoch as u64, bucket as u64, batch as u64, chunk as u64] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Trains embeddings for every node of `graph`. Each undirected edge is used
/// in both directions; edges are grouped into (source partition, destination
/// partition) buckets and every bucket is visited once per epoch.
pub fn train(graph: &SemanticGraph, config: &EmbedConfig) -> Result<(EmbeddingStore, TrainReport), EmbedError> {
    if config.partitions == 0 || config.batch_size == 0 || config.dim < 2 {
        return Err(EmbedError::Config(
            "partitions and batch_size must be positive, dim at least 2".into(),
        ));
    }
    if config.k_batch + config.k_part == 0 {
        return Err(EmbedError::Config("need at least one negative per edge".into()));
    }
    let (keys, edges) = graph.to_indexed();
    let kinds: Vec<NodeKind> = keys.iter().map(NodeKey::kind).collect();
    let parts: Vec<usize> = keys.iter().map(|k| partition_of(k, config.partitions)).collect();
    let mut store = EmbeddingStore::init(keys, config.dim, config.seed);

    let p = config.partitions;
    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); p * p];
    for (a, b) in edges {
        let (a, b) = (a as usize, b as usize);
        buckets[parts[a] * p + parts[b]].push((a, b));
        buckets[parts[b] * p + parts[a]].push((b, a));
    }
    let part_pools: Vec<KindPools<usize>> = (0..p)
        .map(|q| KindPools::new((0..kinds.len()).filter(|i| parts[*i] == q).map(|i| (kinds[i], i))))
        .collect();
    let global = KindPools::new(kinds.iter().copied().zip(0..));
    let mut opt = Adagrad {
        lr: config.lr,
        nodes: vec![0.0; store.table().len()],
        translations: BTreeMap::new(),
    };
    let mut report = TrainReport::default();
    let directed: usize = buckets.iter().map(Vec::len).sum();

    for epoch in 0..config.epochs {
        let mut rng = seeded_rng(config.seed, &format!("hetembed-epoch-{epoch}"));
        let mut order: Vec<usize> = (0..p * p).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for b in order {
            let bucket = (b / p, b % p);
            let mut edges = buckets[b].clone();
            if edges.is_empty() {
                continue;
            }
            edges.shuffle(&mut rng);
            let mut src_parts = BTreeSet::new();
            let mut dst_parts = BTreeSet::new();
            for (bi, batch) in edges.chunks(config.batch_size).enumerate() {
                let batch_src = KindPools::new(batch.iter().map(|e| (kinds[e.0], e.0)));
                let batch_dst = KindPools::new(batch.iter().map(|e| (kinds[e.1], e.1)));
                let src_pools = SidePools { batch: &batch_src, partition: &part_pools[bucket.0] };
                let dst_pools = SidePools { batch: &batch_dst, partition: &part_pools[bucket.1] };
                let results: Vec<(f64, Gradient, u64, Vec<(usize, usize)>)> = batch
                    .par_chunks(GRAD_CHUNK)
                    .enumerate()
                    .map(|(ci, chunk)| {
                        let mut crng = seeded_rng(edge_seed(config.seed, epoch, b, bi, ci), "neg");
                        let mut grad = Gradient::default();
                        let mut loss = 0.0;
                        let mut fallbacks = 0;
                        let mut touched = Vec::new();
                        for &(i, j) in chunk {
                            let negs = draw_negatives(
                                (kinds[i], &i),
                                (kinds[j], &j),
                                &src_pools,
                                &dst_pools,
                                &global,
                                config.k_batch,
                                config.k_part,
                                &mut crng,
                                &mut fallbacks,
                            );
                            let pair = (kinds[i], kinds[j]);
                            loss += indexed_loss(&store, (i, j), pair, &negs, Some(&mut grad));
                            if config.log_buckets {
                                touched.push((i, j));
                                touched.extend(negs);
                            }
                        }
                        (loss, grad, fallbacks, touched)
                    })
                    .collect();
                let mut grad = Gradient::default();
                let mut batch_loss = 0.0;
                for (loss, g, fallbacks, touched) in results {
                    batch_loss += loss;
                    report.fallback_draws += fallbacks;
                    grad.merge(g);
                    for (x, y) in touched {
                        src_parts.insert(parts[x]);
                        dst_parts.insert(parts[y]);
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(EmbedError::Diverged {
                        epoch,
                        bucket,
                        loss: batch_loss,
                    });
                }
                total += batch_loss;
                opt.apply(&mut store, &grad);
            }
            if config.log_buckets {
                report.buckets.push(BucketUpdate {
                    epoch,
                    bucket,
                    source_partitions: src_parts,
                    destination_partitions: dst_parts,
                });
            }
        }
        let mean = total / directed.max(1) as f64;
        info!("embedding epoch {epoch}: mean loss {mean:.5}");
        report.epoch_loss.push(mean);
    }
    if report.fallback_draws > 0 {
        warn!(
            "{} negative draws fell back to the global pool",
            report.fallback_draws
        );
    }
    if !store.is_finite() {
        return Err(EmbedError::Diverged {
            epoch: config.epochs,
            bucket: (0, 0),
            loss: f64::NAN,
        });
    }
    Ok((store, report))
}
