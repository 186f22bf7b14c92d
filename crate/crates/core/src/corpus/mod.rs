//! Document ingestion, temporal-holdout filtering, sentence splitting and
//! token annotation.
//!
//! Annotation is a deterministic lexicon-driven stand-in for a statistical
//! NLP tagger: a stopword list, an exact-match part-of-speech dictionary, an
//! ordered suffix rule table and a multi-word entity gazetteer.

mod annotate;
mod document;
mod split;

pub use annotate::{annotate, annotate_corpus, tokenize, Lexicon, Pos, SuffixRule, Token};
pub use document::{
    ingest, read_sentences, write_sentences, Corpus, CorpusError, Document, IngestOptions,
    IngestOutput, PredicateRecord, RecordError,
};
pub use split::{split_sentences, Sentence, ABBREVIATIONS};
