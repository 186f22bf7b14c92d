//! Approximate nearest-neighbour search: k-means coarse buckets (IVF), with
//! flat codes or product-quantized residuals to the bucket centroid.

mod kmeans;

use std::collections::HashSet;
use std::io::{self, Read, Write};

use log::warn;
use rand::seq::SliceRandom;
use thiserror::Error;

pub use kmeans::{kmeans, KMeans};

use crate::graph::NodeKey;
use crate::util::{
    expect_magic, read_f32s, read_str, read_u32, read_u64, seeded_rng, write_f32s, write_str,
    write_u32, write_u64,
};

pub const CODES_PER_QUANTIZER: usize = 256;
const MAGIC: &[u8; 8] = b"IVFPQ\0\0\x01";

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("dimension {dim} is not divisible by m={m}")]
    Indivisible { dim: usize, m: usize },
    #[error("sample has {got} vectors, need at least {need}")]
    SampleTooSmall { got: usize, need: usize },
    #[error("vector has dimension {got}, index expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("indexes were trained with different codebooks or partitioners")]
    Mismatch,
    #[error("key {0} is already indexed")]
    DuplicateKey(NodeKey),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("bad index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    centroids: Vec<f32>,
}

impl PqCodebook {
    /// Builds a codebook from explicit centroids laid out as m x 256 x chunk_dim.
    pub fn from_centroids(dim: usize, m: usize, centroids: Vec<f32>) -> Result<Self, AnnError> {
        if m == 0 || dim % m != 0 {
            return Err(AnnError::Indivisible { dim, m });
        }
        if centroids.len() != dim * CODES_PER_QUANTIZER {
            return Err(AnnError::Param(format!(
                "expected {} centroid values, got {}",
                dim * CODES_PER_QUANTIZER,
                centroids.len()
            )));
        }
        Ok(Self { dim, m, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn chunk_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn centroid(&self, chunk: usize, code: u8) -> &[f32] {
        let cd = self.chunk_dim();
        let start = (chunk * CODES_PER_QUANTIZER + code as usize) * cd;
        &self.centroids[start..start + cd]
    }

    fn chunk_centroids(&self, chunk: usize) -> &[f32] {
        let len = CODES_PER_QUANTIZER * self.chunk_dim();
        &self.centroids[chunk * len..(chunk + 1) * len]
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        assert_eq!(v.len(), self.dim);
        let cd = self.chunk_dim();
        (0..self.m)
            .map(|j| kmeans::nearest(self.chunk_centroids(j), cd, &v[j * cd..(j + 1) * cd]).0 as u8)
            .collect()
    }

    pub fn reconstruct(&self, code: &[u8]) -> Vec<f32> {
        assert_eq!(code.len(), self.m);
        code.iter()
            .enumerate()
            .flat_map(|(j, c)| self.centroid(j, *c).iter().copied())
            .collect()
    }

    /// Per-chunk squared distances from `query` to every centroid (m x 256).
    pub fn distance_table(&self, query: &[f32]) -> Vec<f64> {
        let cd = self.chunk_dim();
        let mut table = Vec::with_capacity(self.m * CODES_PER_QUANTIZER);
        for j in 0..self.m {
            let q = &query[j * cd..(j + 1) * cd];
            table.extend(
                self.chunk_centroids(j)
                    .chunks_exact(cd)
                    .map(|c| kmeans::sq_dist(q, c)),
            );
        }
        table
    }

    /// Asymmetric distance: exact query against the reconstructed code.
    pub fn asymmetric_distance(table: &[f64], code: &[u8]) -> f64 {
        code.iter()
            .enumerate()
            .map(|(j, c)| table[j * CODES_PER_QUANTIZER + *c as usize])
            .sum()
    }
}

/// Trains one 256-centroid k-means codebook per chunk.
pub fn train_pq(sample: &[Vec<f32>], m: usize, iters: usize, seed: u64) -> Result<PqCodebook, AnnError> {
    if sample.len() < CODES_PER_QUANTIZER {
        return Err(AnnError::SampleTooSmall {
            got: sample.len(),
            need: CODES_PER_QUANTIZER,
        });
    }
    let dim = sample[0].len();
    if m == 0 || dim % m != 0 {
        return Err(AnnError::Indivisible { dim, m });
    }
    check_dims(sample, dim)?;
    let cd = dim / m;
    let mut centroids = Vec::with_capacity(dim * CODES_PER_QUANTIZER);
    for j in 0..m {
        let chunk: Vec<f32> = sample
            .iter()
            .flat_map(|v| v[j * cd..(j + 1) * cd].iter().copied())
            .collect();
        let mut rng = seeded_rng(seed, &format!("pq-chunk-{j}"));
        let km = kmeans(&chunk, cd, CODES_PER_QUANTIZER, iters, &mut rng);
        if km.duplicate_centroids {
            warn!("pq chunk {j}: fewer than {CODES_PER_QUANTIZER} distinct values, duplicate centroids");
        }
        centroids.extend(km.centroids);
    }
    PqCodebook::from_centroids(dim, m, centroids)
}

fn check_dims(vectors: &[Vec<f32>], dim: usize) -> Result<(), AnnError> {
    for v in vectors {
        if v.len() != dim {
            return Err(AnnError::Dimension {
                got: v.len(),
                expected: dim,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePartitioner {
    dim: usize,
    centroids: Vec<f32>,
}

impl CoarsePartitioner {
    pub fn train(sample: &[Vec<f32>], nlist: usize, iters: usize, seed: u64) -> Result<Self, AnnError> {
        if nlist == 0 {
            return Err(AnnError::Param("nlist must be at least 1".into()));
        }
        if sample.len() < nlist {
            return Err(AnnError::SampleTooSmall {
                got: sample.len(),
                need: nlist,
            });
        }
        let dim = sample[0].len();
        check_dims(sample, dim)?;
        let flat: Vec<f32> = sample.iter().flatten().copied().collect();
        let mut rng = seeded_rng(seed, "coarse");
        let km = kmeans(&flat, dim, nlist, iters, &mut rng);
        Ok(Self {
            dim,
            centroids: km.centroids,
        })
    }

    pub fn nlist(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn assign(&self, v: &[f32]) -> usize {
        kmeans::nearest(&self.centroids, self.dim, v).0
    }

    pub fn centroid(&self, bucket: usize) -> &[f32] {
        &self.centroids[bucket * self.dim..(bucket + 1) * self.dim]
    }

    /// `v` minus the centroid of `bucket`.
    pub fn residual(&self, v: &[f32], bucket: usize) -> Vec<f32> {
        v.iter().zip(self.centroid(bucket)).map(|(x, c)| x - c).collect()
    }

    /// The `nprobe` buckets nearest to `v`, nearest first.
    pub fn probe(&self, v: &[f32], nprobe: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, c)| (kmeans::sq_dist(c, v), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(nprobe).map(|(_, i)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    /// Uncompressed little-endian f32 values.
    Flat { dim: usize },
    Pq(PqCodebook),
}

impl Encoding {
    pub fn dim(&self) -> usize {
        match self {
            Encoding::Flat { dim } => *dim,
            Encoding::Pq(cb) => cb.dim(),
        }
    }

    pub fn code_len(&self) -> usize {
        match self {
            Encoding::Flat { dim } => dim * 4,
            Encoding::Pq(cb) => cb.m(),
        }
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        match self {
            Encoding::Flat { .. } => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Encoding::Pq(cb) => cb.encode(v),
        }
    }
}

/// Bytes per vector for float32 storage divided by bytes per PQ code.
pub fn compression_ratio(dim: usize, m: usize) -> f64 {
    (dim * 4) as f64 / m as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnParams {
    /// Sub-quantizer count; `None` stores flat vectors.
    pub m: Option<usize>,
    pub nlist: usize,
    pub nprobe: usize,
    pub k: usize,
    pub iters: usize,
}

impl AnnParams {
    pub fn paper() -> Self {
        Self {
            m: Some(96),
            nlist: 2048,
            nprobe: 16,
            k: 25,
            iters: 25,
        }
    }

    pub fn desk() -> Self {
        Self {
            m: Some(8),
            nlist: 64,
            nprobe: 16,
            k: 25,
            iters: 25,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    encoding: Encoding,
    partitioner: CoarsePartitioner,
    buckets: Vec<Vec<(NodeKey, Vec<u8>)>>,
}

impl AnnIndex {
    pub fn new(encoding: Encoding, partitioner: CoarsePartitioner) -> Result<Self, AnnError> {
        if encoding.dim() != partitioner.dim() {
            return Err(AnnError::Dimension {
                got: partitioner.dim(),
                expected: encoding.dim(),
            });
        }
        let buckets = vec![Vec::new(); partitioner.nlist()];
        Ok(Self {
            encoding,
            partitioner,
            buckets,
        })
    }

    /// Trains an empty index on a random `fraction` of `vectors` (at least
    /// 256 vectors, or all of them if fewer).
    pub fn train(vectors: &[Vec<f32>], params: &AnnParams, fraction: f64, seed: u64) -> Result<Self, AnnError> {
        if vectors.is_empty() {
            return Err(AnnError::SampleTooSmall { got: 0, need: 1 });
        }
        let want = ((vectors.len() as f64 * fraction).ceil() as usize)
            .max(CODES_PER_QUANTIZER)
            .max(params.nlist)
            .min(vectors.len());
        let mut idx: Vec<usize> = (0..vectors.len()).collect();
        idx.shuffle(&mut seeded_rng(seed, "ann-sample"));
        idx.truncate(want);
        idx.sort_unstable();
        let sample: Vec<Vec<f32>> = idx.iter().map(|i| vectors[*i].clone()).collect();
        let partitioner = CoarsePartitioner::train(&sample, params.nlist, params.iters, seed)?;
        let encoding = match params.m {
            None => Encoding::Flat { dim: sample[0].len() },
            Some(m) => {
                let residuals: Vec<Vec<f32>> =
                    sample.iter().map(|v| partitioner.residual(v, partitioner.assign(v))).collect();
                Encoding::Pq(train_pq(&residuals, m, params.iters, seed)?)
            }
        };
        Self::new(encoding, partitioner)
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn partitioner(&self) -> &CoarsePartitioner {
        &self.partitioner
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, id: usize) -> &[(NodeKey, Vec<u8>)] {
        &self.buckets[id]
    }

    fn keys(&self) -> HashSet<&NodeKey> {
        self.buckets.iter().flatten().map(|(k, _)| k).collect()
    }

    /// Encodes and stores vectors. Keys must not already be present.
    pub fn add(&mut self, items: &[(NodeKey, Vec<f32>)]) -> Result<(), AnnError> {
        let dim = self.encoding.dim();
        let mut seen: HashSet<NodeKey> = self.keys().into_iter().cloned().collect();
        for (key, v) in items {
            if v.len() != dim {
                return Err(AnnError::Dimension {
                    got: v.len(),
                    expected: dim,
                });
            }
            if !seen.insert(key.clone()) {
                return Err(AnnError::DuplicateKey(key.clone()));
            }
        }
        use rayon::prelude::*;
        let encoded: Vec<(usize, Vec<u8>)> = items
            .par_iter()
            .map(|(_, v)| {
                let bucket = self.partitioner.assign(v);
                let code = match &self.encoding {
                    Encoding::Flat { .. } => self.encoding.encode(v),
                    Encoding::Pq(cb) => cb.encode(&self.partitioner.residual(v, bucket)),
                };
                (bucket, code)
            })
            .collect();
        for ((key, _), (bucket, code)) in items.iter().zip(encoded) {
            self.buckets[bucket].push((key.clone(), code));
        }
        Ok(())
    }

    /// Up to `k` nearest stored vectors among the `nprobe` nearest buckets,
    /// ascending by distance then key.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Vec<(NodeKey, f64)> {
        assert_eq!(query.len(), self.encoding.dim(), "query dimension");
        if self.is_empty() || k == 0 {
            return Vec::new();
        }
        let probes = self.partitioner.probe(query, nprobe.min(self.partitioner.nlist()));
        let mut hits: Vec<(f64, &NodeKey)> = Vec::new();
        match &self.encoding {
            Encoding::Flat { .. } => {
                for b in probes {
                    for (key, code) in &self.buckets[b] {
                        let d: f64 = code
                            .chunks_exact(4)
                            .zip(query)
                            .map(|(c, q)| {
                                let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                                let d = f64::from(x) - f64::from(*q);
                                d * d
                            })
                            .sum();
                        hits.push((d, key));
                    }
                }
            }
            Encoding::Pq(cb) => {
                for b in probes {
                    let table = cb.distance_table(&self.partitioner.residual(query, b));
                    for (key, code) in &self.buckets[b] {
                        hits.push((PqCodebook::asymmetric_distance(&table, code), key));
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        hits.into_iter()
            .take(k)
            .map(|(d, key)| (key.clone(), d))
            .collect()
    }

    /// Bucket-wise concatenation of two indexes sharing a codebook and partitioner.
    pub fn merge(mut self, other: AnnIndex) -> Result<AnnIndex, AnnError> {
        if self.encoding != other.encoding || self.partitioner != other.partitioner {
            return Err(AnnError::Mismatch);
        }
        let mine = self.keys().into_iter().cloned().collect::<HashSet<_>>();
        for (key, _) in other.buckets.iter().flatten() {
            if mine.contains(key) {
                return Err(AnnError::DuplicateKey(key.clone()));
            }
        }
        for (dst, src) in self.buckets.iter_mut().zip(other.buckets) {
            dst.extend(src);
        }
        Ok(self)
    }

    pub fn write(&self, w: &mut dyn Write) -> Result<(), AnnError> {
        w.write_all(MAGIC)?;
        write_u32(w, self.encoding.dim() as u32)?;
        let m = match &self.encoding {
            Encoding::Flat { .. } => 0,
            Encoding::Pq(cb) => cb.m(),
        };
        write_u32(w, m as u32)?;
        write_u32(w, self.partitioner.nlist() as u32)?;
        if let Encoding::Pq(cb) = &self.encoding {
            write_f32s(w, cb.centroids.iter().copied())?;
        }
        write_f32s(w, self.partitioner.centroids.iter().copied())?;
        for bucket in &self.buckets {
            write_u64(w, bucket.len() as u64)?;
            for (key, code) in bucket {
                write_str(w, &key.to_string())?;
                w.write_all(code)?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut dyn Read) -> Result<AnnIndex, AnnError> {
        expect_magic(r, MAGIC)?;
        let dim = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        let nlist = read_u32(r)? as usize;
        if dim == 0 || nlist == 0 {
            return Err(AnnError::Format("zero dimension or bucket count".into()));
        }
        let encoding = if m == 0 {
            Encoding::Flat { dim }
        } else {
            if dim % m != 0 {
                return Err(AnnError::Indivisible { dim, m });
            }
            Encoding::Pq(PqCodebook::from_centroids(
                dim,
                m,
                read_f32s(r, dim * CODES_PER_QUANTIZER)?,
            )?)
        };
        let partitioner = CoarsePartitioner {
            dim,
            centroids: read_f32s(r, nlist * dim)?,
        };
        let code_len = encoding.code_len();
        let mut index = AnnIndex::new(encoding, partitioner)?;
        let mut seen = HashSet::new();
        for b in 0..nlist {
            let count = read_u64(r)?;
            for _ in 0..count {
                let key: NodeKey = read_str(r)?
                    .parse()
                    .map_err(|e| AnnError::Format(format!("{e}")))?;
                let mut code = vec![0u8; code_len];
                r.read_exact(&mut code)?;
                if !seen.insert(key.clone()) {
                    return Err(AnnError::DuplicateKey(key));
                }
                index.buckets[b].push((key, code));
            }
        }
        Ok(index)
    }
}
