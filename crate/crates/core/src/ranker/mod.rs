//! Predicate-set ranking: sample construction, the set-encoder model and
//! margin-loss training.

mod model;
mod sample;
mod train;

use std::io;

use thiserror::Error;

pub use model::{ForwardCache, ModelConfig, ParamCounts, RankingModel};
pub use sample::{
    build_positive, build_scramble, build_swap, PredicateSample, SampleContext, SampleKind,
    REJECTION_ATTEMPTS,
};
pub use train::{
    lr_at, margin_loss, margin_loss_grad, rank_pairs, read_ranking, sample_input, score_sample,
    sort_ranking, train_ranker, training_pairs, write_ranking, RankedPair, RankerConfig,
    RankerReport,
};

use crate::graph::NodeKey;
use crate::hetembed::StoreError;

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown term {0}")]
    UnknownTerm(NodeKey),
    #[error("sample terms must differ, got {0} twice")]
    SameTerm(NodeKey),
    #[error("pool has {0} entries; enlarge the term or predicate pool")]
    PoolTooSmall(usize),
    #[error("no pair of terms with disjoint predicate sets found in {0} attempts; enlarge the term pool")]
    RejectionExhausted(usize),
    #[error("no embedding for {0}")]
    MissingEmbedding(NodeKey),
    #[error("embedding dimension {got} does not match model input dimension {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("need at least {need} training predicates, found {got}")]
    TooFewPositives { got: usize, need: usize },
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("bad checkpoint or ranking file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
