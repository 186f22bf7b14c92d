use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("node key {0:?} lacks a kind prefix")]
    MissingPrefix(String),
    #[error("unknown node kind prefix {0:?}")]
    UnknownKind(String),
    #[error("node key {0:?} has an empty name or contains tab/newline")]
    BadName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Sentence,
    Predicate,
    Lemma,
    Entity,
    Ngram,
    CodedTerm,
}

impl NodeKind {
    pub const ALL: [NodeKind; 6] = [
        NodeKind::Sentence,
        NodeKind::Predicate,
        NodeKind::Lemma,
        NodeKind::Entity,
        NodeKind::Ngram,
        NodeKind::CodedTerm,
    ];

    pub fn prefix(self) -> char {
        match self {
            NodeKind::Sentence => 's',
            NodeKind::Predicate => 'p',
            NodeKind::Lemma => 'l',
            NodeKind::Entity => 'e',
            NodeKind::Ngram => 'n',
            NodeKind::CodedTerm => 'c',
        }
    }

    pub fn from_prefix(c: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| c.len() == 1 && c.starts_with(k.prefix()))
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Sentence => "sentence",
            NodeKind::Predicate => "predicate",
            NodeKind::Lemma => "lemma",
            NodeKind::Entity => "entity",
            NodeKind::Ngram => "ngram",
            NodeKind::CodedTerm => "coded_term",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Typed node identifier, rendered as `<prefix>:<name>` (e.g. `s:PMID1:0`,
/// `p:C01:treats:C02`, `c:C01`). Ordering matches the rendered string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeKey {
    kind: NodeKind,
    name: String,
}

impl NodeKey {
    /// Panics on an invalid name; use [`NodeKey::try_new`] for untrusted input.
    pub fn new(kind: NodeKind, name: impl Into<String>) -> Self {
        Self::try_new(kind, name).expect("invalid node name")
    }

    pub fn try_new(kind: NodeKind, name: impl Into<String>) -> Result<Self, KeyError> {
        let name = name.into();
        if name.is_empty() || name.contains(['\t', '\n', '\r']) {
            return Err(KeyError::BadName(name));
        }
        Ok(Self { kind, name })
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Ord for NodeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.kind
            .prefix()
            .cmp(&other.kind.prefix())
            .then_with(|| self.name.cmp(&other.name))
    }
}

impl PartialOrd for NodeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.prefix(), self.name)
    }
}

impl FromStr for NodeKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (prefix, name) = s
            .split_once(':')
            .ok_or_else(|| KeyError::MissingPrefix(s.to_string()))?;
        let kind = NodeKind::from_prefix(prefix).ok_or_else(|| KeyError::UnknownKind(prefix.to_string()))?;
        NodeKey::try_new(kind, name)
    }
}

impl Serialize for NodeKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
