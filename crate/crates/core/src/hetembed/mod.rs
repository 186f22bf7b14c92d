//! Typed node embeddings trained with a sampled-softmax loss over graph edges.
//!
//! Every embedding reserves its first entry as a bias unit. An edge i -> j is
//! scored through a translation vector selected by the ordered kind pair of
//! its endpoints.

mod store;
mod train;

pub use store::{EmbeddingStore, StoreError};
pub use train::{
    edge_loss, edge_loss_grad, Gradient, IndexHasher, RowMap,
    partition_of, sample_negatives, train, BucketUpdate, EmbedConfig, EmbedError, NegativeBatch,
    TrainReport,
};

/// Edge score with a typed translation; index 0 is the bias.
pub fn score_raw(ei: &[f64], ej: &[f64], t: &[f64]) -> f64 {
    let mut s = ei[0] + ej[0] + t[0];
    for k in 1..ei.len() {
        s += ei[k] * (ej[k] + t[k]);
    }
    s
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Loss of one positive score against its negative scores.
pub fn softmax_loss(positive: f64, negatives: &[f64]) -> f64 {
    -positive + log_sum_exp(negatives)
}
