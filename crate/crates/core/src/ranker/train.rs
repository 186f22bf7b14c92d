use std::io::{BufRead, Write};

use log::info;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use super::model::{ModelConfig, RankingModel};
use super::sample::{build_positive, build_scramble, build_swap, PredicateSample, SampleContext};
use super::RankerError;
use crate::graph::{NodeKey, NodeKind, SemanticGraph};
use crate::hetembed::EmbeddingStore;
use crate::util::{fnv1a64, seeded_rng};

const CHUNK: usize = 8;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RankerConfig {
    pub model: ModelConfig,
    pub s: usize,
    pub scrambles: usize,
    pub swaps: usize,
    pub margin: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_positives: usize,
    pub epochs: usize,
    /// Negatives scored per positive per step, drawn from the
    /// `scrambles + swaps` candidates.
    pub scored_negatives: usize,
    pub holdout: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl RankerConfig {
    pub fn paper(input_dim: usize) -> Self {
        Self {
            model: ModelConfig::paper(input_dim),
            s: 15,
            scrambles: 10,
            swaps: 30,
            margin: 0.1,
            lr: 0.01,
            warmup_steps: 1000,
            batch_positives: 600,
            epochs: 10,
            scored_negatives: 3,
            holdout: 0.01,
            patience: 0,
            seed: 0,
        }
    }

    pub fn desk(input_dim: usize) -> Self {
        Self {
            model: ModelConfig::desk(input_dim),
            lr: 0.001,
            warmup_steps: 20,
            batch_positives: 32,
            epochs: 20,
            ..Self::paper(input_dim)
        }
    }

    fn negatives(&self) -> usize {
        self.scrambles + self.swaps
    }

    fn validate(&self) -> Result<(), RankerError> {
        self.model.validate()?;
        if self.negatives() == 0 || self.scored_negatives == 0 || self.scored_negatives > self.negatives() {
            return Err(RankerError::Config(format!(
                "scored negatives {} must be in 1..={}",
                self.scored_negatives,
                self.negatives()
            )));
        }
        if self.batch_positives == 0 {
            return Err(RankerError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(RankerError::Config(format!("holdout {} outside [0, 1)", self.holdout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankerReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
    pub steps: usize,
}

/// Linear warmup: `lr * min(1, step / warmup)`, steps counted from 1.
pub fn lr_at(step: usize, lr: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * (step as f64 / warmup as f64).min(1.0)
    }
}

/// Sum over all negatives of `max(0, m - pos + neg)`.
pub fn margin_loss(pos: f64, scrambles: &[f64], swaps: &[f64], m: f64) -> f64 {
    scrambles
        .iter()
        .chain(swaps)
        .map(|n| (m - pos + n).max(0.0))
        .sum()
}

/// Loss with its derivatives with respect to the positive score and each
/// negative score (scrambles first, then swaps).
pub fn margin_loss_grad(pos: f64, scrambles: &[f64], swaps: &[f64], m: f64) -> (f64, f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dpos = 0.0;
    let dneg = scrambles
        .iter()
        .chain(swaps)
        .map(|n| {
            let l = m - pos + n;
            if l > 0.0 {
                loss += l;
                dpos -= 1.0;
                1.0
            } else {
                0.0
            }
        })
        .collect();
    (loss, dpos, dneg)
}

/// Row-major embedding matrix for the sample's elements.
pub fn sample_input(store: &EmbeddingStore, sample: &PredicateSample) -> Result<Vec<f64>, RankerError> {
    let mut x = Vec::with_capacity(sample.elements.len() * store.dim());
    for e in &sample.elements {
        let row = store
            .get(e)
            .ok_or_else(|| RankerError::MissingEmbedding(e.clone()))?;
        x.extend_from_slice(row);
    }
    Ok(x)
}

fn check_dims(model: &RankingModel, store: &EmbeddingStore) -> Result<(), RankerError> {
    if store.dim() != model.config().input_dim {
        return Err(RankerError::Dimension {
            got: store.dim(),
            expected: model.config().input_dim,
        });
    }
    Ok(())
}

/// Inference score of one sample, dropout off.
pub fn score_sample(model: &RankingModel, store: &EmbeddingStore, sample: &PredicateSample) -> Result<f64, RankerError> {
    check_dims(model, store)?;
    let x = sample_input(store, sample)?;
    Ok(model.score(&x, sample.elements.len()))
}

/// (subject, object) term pairs of every predicate in the graph.
pub fn training_pairs(graph: &SemanticGraph) -> Vec<(NodeKey, NodeKey)> {
    graph
        .nodes_of_kind(NodeKind::Predicate)
        .filter_map(|p| graph.predicate_pair(p))
        .collect()
}

fn mix(parts: &[u64]) -> u64 {
    let bytes: Vec<u8> = parts.iter().flat_map(|p| p.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

fn build_negative<R: Rng>(cfg: &RankerConfig, ctx: &SampleContext, which: usize, rng: &mut R) -> Result<PredicateSample, RankerError> {
    if which < cfg.scrambles {
        build_scramble(ctx.term_pool(), ctx.predicate_pool(), ctx, cfg.s, rng)
    } else {
        build_swap(ctx.term_pool(), ctx, cfg.s, rng)
    }
}

/// Loss and parameter gradient for one positive, scoring a random subset of
/// its negatives scaled so the expected loss equals the full sum.
fn positive_step<R: Rng>(
    model: &RankingModel,
    store: &EmbeddingStore,
    ctx: &SampleContext,
    cfg: &RankerConfig,
    pair: &(NodeKey, NodeKey),
    rng: &mut R,
    grad: &mut [f64],
) -> Result<f64, RankerError> {
    let pos = build_positive(&pair.0, &pair.1, ctx, cfg.s, rng)?;
    let chosen = index::sample(rng, cfg.negatives(), cfg.scored_negatives).into_vec();
    let weight = cfg.negatives() as f64 / cfg.scored_negatives as f64;
    let x = sample_input(store, &pos)?;
    let pos_cache = model.forward(&x, pos.elements.len(), Some(&mut *rng));
    let p = pos_cache.score();
    let mut loss = 0.0;
    let mut dpos = 0.0;
    for which in chosen {
        let neg = build_negative(cfg, ctx, which, rng)?;
        let xn = sample_input(store, &neg)?;
        let cache = model.forward(&xn, neg.elements.len(), Some(&mut *rng));
        let l = cfg.margin - p + cache.score();
        if l > 0.0 {
            loss += weight * l;
            dpos -= weight;
            model.backward(&cache, weight, grad);
        }
    }
    if dpos != 0.0 {
        model.backward(&pos_cache, dpos, grad);
    }
    Ok(loss)
}

/// Full margin loss (all negatives, dropout off) for one held-out positive.
fn validation_loss(
    model: &RankingModel,
    store: &EmbeddingStore,
    ctx: &SampleContext,
    cfg: &RankerConfig,
    pair: &(NodeKey, NodeKey),
    seed: u64,
) -> Result<f64, RankerError> {
    let mut rng = seeded_rng(seed, "ranker-validation");
    let pos = build_positive(&pair.0, &pair.1, ctx, cfg.s, &mut rng)?;
    let p = score_sample(model, store, &pos)?;
    let mut negs = Vec::with_capacity(cfg.negatives());
    for which in 0..cfg.negatives() {
        let neg = build_negative(cfg, ctx, which, &mut rng)?;
        negs.push(score_sample(model, store, &neg)?);
    }
    Ok(margin_loss(p, &negs[..cfg.scrambles], &negs[cfg.scrambles..], cfg.margin))
}

fn mean_validation_loss(
    model: &RankingModel,
    store: &EmbeddingStore,
    ctx: &SampleContext,
    cfg: &RankerConfig,
    pairs: &[(NodeKey, NodeKey)],
) -> Result<f64, RankerError> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Result<Vec<f64>, RankerError> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| validation_loss(model, store, ctx, cfg, pair, mix(&[cfg.seed, i as u64])))
        .collect();
    Ok(losses?.iter().sum::<f64>() / pairs.len() as f64)
}

/// Trains on `positives` (term pairs of observed predicates) with Adam and
/// linear warmup. A random `holdout` fraction (at least one pair) is kept for
/// validation; the parameters with the lowest validation loss are returned.
pub fn train_ranker(
    ctx: &SampleContext,
    store: &EmbeddingStore,
    positives: &[(NodeKey, NodeKey)],
    cfg: &RankerConfig,
) -> Result<(RankingModel, RankerReport), RankerError> {
    cfg.validate()?;
    if positives.len() < 2 {
        return Err(RankerError::TooFewPositives {
            got: positives.len(),
            need: 2,
        });
    }
    let mut model = RankingModel::new(cfg.model.clone(), cfg.seed)?;
    check_dims(&model, store)?;

    let mut pairs = positives.to_vec();
    pairs.shuffle(&mut seeded_rng(cfg.seed, "ranker-holdout"));
    let n_val = if cfg.holdout > 0.0 {
        ((pairs.len() as f64 * cfg.holdout).round() as usize).clamp(1, pairs.len() - 1)
    } else {
        0
    };
    let validation = pairs.split_off(pairs.len() - n_val);
    let train = pairs;

    let n = model.param_count();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut step = 0usize;
    let mut report = RankerReport::default();
    let mut best = (f64::INFINITY, model.params().to_vec());
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut seeded_rng(cfg.seed, &format!("ranker-epoch-{epoch}")));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_positives) {
            step += 1;
            let parts: Result<Vec<(f64, Vec<f64>)>, RankerError> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(ci, chunk)| {
                    let mut rng = seeded_rng(mix(&[cfg.seed, step as u64, ci as u64]), "ranker-step");
                    let mut grad = vec![0.0; n];
                    let mut loss = 0.0;
                    for pair in chunk {
                        loss += positive_step(&model, store, ctx, cfg, pair, &mut rng, &mut grad)?;
                    }
                    Ok((loss, grad))
                })
                .collect();
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            for (l, g) in parts? {
                loss += l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(RankerError::Diverged { epoch, step });
            }
            epoch_loss += loss;

            let lr = lr_at(step, cfg.lr, cfg.warmup_steps);
            let c1 = 1.0 - ADAM_B1.powi(step as i32);
            let c2 = 1.0 - ADAM_B2.powi(step as i32);
            for (((w, g), a), b) in model.params_mut().iter_mut().zip(&grad).zip(&mut m1).zip(&mut m2) {
                let g = g * scale;
                *a = ADAM_B1 * *a + (1.0 - ADAM_B1) * g;
                *b = ADAM_B2 * *b + (1.0 - ADAM_B2) * g * g;
                *w -= lr * (*a / c1) / ((*b / c2).sqrt() + ADAM_EPS);
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val = mean_validation_loss(&model, store, ctx, cfg, &validation)?;
        info!("ranker epoch {epoch}: train loss {train_loss:.5}, validation loss {val:.5}");
        report.train_loss.push(train_loss);
        report.validation_loss.push(val);
        // Without a holdout every epoch counts as an improvement.
        if val.is_nan() || val < best.0 {
            best = (if val.is_nan() { f64::INFINITY } else { val }, model.params().to_vec());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                info!("ranker: stopping early after epoch {epoch}");
                break;
            }
        }
    }
    report.steps = step;
    if cfg.epochs > 0 {
        model.params_mut().copy_from_slice(&best.1);
    }
    Ok((model, report))
}

/// Mean score over `samples_per_pair` freshly drawn positive-structured
/// samples per pair. Each pair's draws depend only on (seed, pair).
pub fn rank_pairs(
    model: &RankingModel,
    store: &EmbeddingStore,
    ctx: &SampleContext,
    pairs: &[(NodeKey, NodeKey)],
    samples_per_pair: usize,
    s: usize,
    seed: u64,
) -> Vec<Result<f64, RankerError>> {
    pairs
        .par_iter()
        .map(|(a, b)| {
            if samples_per_pair == 0 {
                return Err(RankerError::Config("samples_per_pair must be positive".into()));
            }
            let salt = format!("rank:{a}\t{b}");
            let mut rng = seeded_rng(seed, &salt);
            let mut total = 0.0;
            for _ in 0..samples_per_pair {
                let sample = build_positive(a, b, ctx, s, &mut rng)?;
                total += score_sample(model, store, &sample)?;
            }
            Ok(total / samples_per_pair as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPair {
    pub alpha: NodeKey,
    pub beta: NodeKey,
    pub score: f64,
}

/// Score descending, then (alpha, beta) ascending.
pub fn sort_ranking(ranked: &mut [RankedPair]) {
    ranked.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| (&x.alpha, &x.beta).cmp(&(&y.alpha, &y.beta)))
    });
}

pub fn write_ranking(w: &mut dyn Write, ranked: &[RankedPair]) -> std::io::Result<()> {
    for r in ranked {
        writeln!(w, "{}\t{}\t{:.9}", r.alpha, r.beta, r.score)?;
    }
    Ok(())
}

pub fn read_ranking<R: BufRead>(r: R) -> Result<Vec<RankedPair>, RankerError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| RankerError::Format(format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        out.push(RankedPair {
            alpha: f[0].parse().map_err(|e| bad(format!("{e}")))?,
            beta: f[1].parse().map_err(|e| bad(format!("{e}")))?,
            score: f[2].parse().map_err(|e| bad(format!("{e}")))?,
        });
    }
    Ok(out)
}
