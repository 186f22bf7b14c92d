//! Multi-layer semantic graph: sentences, predicates, lemmas, entities,
//! n-grams and coded terms, with undirected typed edges.

mod build;
mod key;
mod tsv;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use build::{build, knn_edges, GraphBuilder};
pub use key::{KeyError, NodeKey, NodeKind};
pub use tsv::{read_nodes, read_tsv, write_nodes, write_tsv};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge {a} -- {b} is not permitted by the graph schema")]
    Schema { a: NodeKey, b: NodeKey },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Key(#[from] KeyError),
}

/// Unordered node-kind pairs an edge may connect.
pub const ALLOWED_EDGE_KINDS: &[(NodeKind, NodeKind)] = &[
    (NodeKind::Sentence, NodeKind::Sentence),
    (NodeKind::Sentence, NodeKind::Lemma),
    (NodeKind::Sentence, NodeKind::Entity),
    (NodeKind::Sentence, NodeKind::Ngram),
    (NodeKind::Sentence, NodeKind::CodedTerm),
    (NodeKind::Sentence, NodeKind::Predicate),
    (NodeKind::Predicate, NodeKind::CodedTerm),
    (NodeKind::Predicate, NodeKind::Lemma),
    (NodeKind::Predicate, NodeKind::Entity),
    (NodeKind::Predicate, NodeKind::Ngram),
];

pub fn edge_allowed(a: NodeKind, b: NodeKind) -> bool {
    ALLOWED_EDGE_KINDS
        .iter()
        .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
}

/// Symmetric adjacency without self-loops or duplicate neighbours.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SemanticGraph {
    adjacency: BTreeMap<NodeKey, BTreeSet<NodeKey>>,
    semantic_types: BTreeMap<NodeKey, String>,
}

impl SemanticGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, key: NodeKey) {
        self.adjacency.entry(key).or_default();
    }

    /// Records the semantic type of a coded term. The first declaration wins.
    pub fn declare_term(&mut self, key: NodeKey, semantic_type: &str) {
        debug_assert_eq!(key.kind(), NodeKind::CodedTerm);
        match self.semantic_types.get(&key) {
            Some(existing) if existing != semantic_type => {
                log::warn!(
                    "term {key} declared as {semantic_type:?}, keeping earlier type {existing:?}"
                );
            }
            Some(_) => {}
            None => {
                self.semantic_types.insert(key.clone(), semantic_type.to_string());
            }
        }
        self.add_node(key);
    }

    /// Inserts an undirected edge. Self-loops are ignored.
    pub fn add_edge(&mut self, a: NodeKey, b: NodeKey) -> Result<(), GraphError> {
        if !edge_allowed(a.kind(), b.kind()) {
            return Err(GraphError::Schema { a, b });
        }
        if a == b {
            return Ok(());
        }
        self.adjacency.entry(a.clone()).or_default().insert(b.clone());
        self.adjacency.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn contains(&self, key: &NodeKey) -> bool {
        self.adjacency.contains_key(key)
    }

    pub fn neighbors(&self, key: &NodeKey) -> Option<&BTreeSet<NodeKey>> {
        self.adjacency.get(key)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeKey> {
        self.adjacency.keys()
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &NodeKey> {
        self.adjacency.keys().filter(move |k| k.kind() == kind)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Each undirected edge once as (a, b) with a < b, in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (&NodeKey, &NodeKey)> {
        self.adjacency
            .iter()
            .flat_map(|(a, ns)| ns.range((std::ops::Bound::Excluded(a), std::ops::Bound::Unbounded)).map(move |b| (a, b)))
    }

    pub fn semantic_type(&self, term: &NodeKey) -> Option<&str> {
        self.semantic_types.get(term).map(String::as_str)
    }

    /// Predicates containing `term` as subject or object. `None` marks a term
    /// the graph has never seen, as opposed to a known term with no predicates.
    pub fn gamma(&self, term: &NodeKey) -> Option<BTreeSet<NodeKey>> {
        let ns = self.adjacency.get(term)?;
        if term.kind() != NodeKind::CodedTerm {
            return None;
        }
        Some(
            ns.iter()
                .filter(|n| n.kind() == NodeKind::Predicate)
                .cloned()
                .collect(),
        )
    }

    /// Subject and object terms of a predicate node.
    pub fn predicate_terms(&self, predicate: &NodeKey) -> Vec<&NodeKey> {
        self.adjacency
            .get(predicate)
            .map(|ns| ns.iter().filter(|n| n.kind() == NodeKind::CodedTerm).collect())
            .unwrap_or_default()
    }

    /// (subject, object) of a predicate named `subject:verb:object`, falling
    /// back to the sorted term neighbours when the name cannot be split.
    /// `None` for self-predicates and unknown nodes.
    pub fn predicate_pair(&self, predicate: &NodeKey) -> Option<(NodeKey, NodeKey)> {
        let terms = self.predicate_terms(predicate);
        if terms.len() != 2 {
            return None;
        }
        let name = predicate.name();
        if let (Some(first), Some(last)) = (name.find(':'), name.rfind(':')) {
            let subj = NodeKey::new(NodeKind::CodedTerm, &name[..first]);
            let obj = NodeKey::new(NodeKind::CodedTerm, &name[last + 1..]);
            if first < last && terms.contains(&&subj) && terms.contains(&&obj) && subj != obj {
                return Some((subj, obj));
            }
        }
        Some((terms[0].clone(), terms[1].clone()))
    }

    /// Dense node numbering plus undirected edges as index pairs, both sorted.
    pub fn to_indexed(&self) -> (Vec<NodeKey>, Vec<(u32, u32)>) {
        let keys: Vec<NodeKey> = self.adjacency.keys().cloned().collect();
        let index: BTreeMap<&NodeKey, u32> =
            keys.iter().enumerate().map(|(i, k)| (k, i as u32)).collect();
        let edges = self.edges().map(|(a, b)| (index[a], index[b])).collect();
        (keys, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(s: &str) -> NodeKey {
        s.parse().unwrap()
    }

    #[test]
    fn predicate_pairs_follow_name_order() {
        let mut g = SemanticGraph::new();
        let p = k("p:C2:treats:C1");
        g.add_edge(p.clone(), k("c:C1")).unwrap();
        g.add_edge(p.clone(), k("c:C2")).unwrap();
        assert_eq!(g.predicate_pair(&p), Some((k("c:C2"), k("c:C1"))));
        let odd = k("p:weird");
        g.add_edge(odd.clone(), k("c:C2")).unwrap();
        g.add_edge(odd.clone(), k("c:C1")).unwrap();
        assert_eq!(g.predicate_pair(&odd), Some((k("c:C1"), k("c:C2"))));
        let selfp = k("p:C1:isa:C1");
        g.add_edge(selfp.clone(), k("c:C1")).unwrap();
        assert_eq!(g.predicate_pair(&selfp), None);
    }

    #[test]
    fn undirected_no_self_loops_no_duplicates() {
        let mut g = SemanticGraph::new();
        g.add_edge(k("s:d:0"), k("s:d:1")).unwrap();
        g.add_edge(k("s:d:1"), k("s:d:0")).unwrap();
        g.add_edge(k("s:d:0"), k("s:d:0")).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(g.neighbors(&k("s:d:1")).unwrap().contains(&k("s:d:0")));
    }

    #[test]
    fn schema_violation() {
        let mut g = SemanticGraph::new();
        assert!(matches!(
            g.add_edge(k("l:cell"), k("c:C1")),
            Err(GraphError::Schema { .. })
        ));
    }

    #[test]
    fn gamma_known_unknown_isolated() {
        let mut g = SemanticGraph::new();
        g.declare_term(k("c:A"), "gngm");
        g.declare_term(k("c:B"), "dsyn");
        g.declare_term(k("c:Z"), "dsyn");
        for (s, o) in [("A", "B"), ("A", "X"), ("A", "Y"), ("Q", "A"), ("R", "A")] {
            let p = k(&format!("p:{s}:treats:{o}"));
            g.add_edge(p.clone(), k(&format!("c:{s}"))).unwrap();
            g.add_edge(p, k(&format!("c:{o}"))).unwrap();
        }
        assert_eq!(g.gamma(&k("c:A")).unwrap().len(), 5);
        assert_eq!(g.gamma(&k("c:Z")), Some(BTreeSet::new()));
        assert_eq!(g.gamma(&k("c:nope")), None);
        let p = k("p:A:treats:B");
        let terms: Vec<String> = g.predicate_terms(&p).iter().map(|t| t.to_string()).collect();
        assert_eq!(terms, vec!["c:A", "c:B"]);
        assert_eq!(g.semantic_type(&k("c:A")), Some("gngm"));
    }
}
