//! Literature-based hypothesis generation, end to end.
//!
//! The pipeline turns a dated document corpus into a typed semantic graph,
//! embeds that graph, trains a set-encoder ranking model over predicate
//! neighbourhoods, and scores the result with recommendation metrics:
//!
//! ```text
//! corpus -> phrase_mining -> sent_embed -> ann -> graph -> hetembed -> ranker -> evalharness
//! ```
//!
//! [`pipeline`] wires the stages together with content-hash stage caching.

pub mod ann;
pub mod corpus;
pub mod evalharness;
pub mod graph;
pub mod hetembed;
pub mod phrase_mining;
pub mod pipeline;
pub mod ranker;
pub mod sent_embed;
pub mod synth;
pub mod util;

pub use graph::{NodeKey, NodeKind, SemanticGraph};
