use std::collections::BTreeSet;

use rayon::prelude::*;

use super::{GraphError, NodeKey, NodeKind, SemanticGraph};
use crate::ann::AnnIndex;
use crate::corpus::{Document, Sentence};
use crate::phrase_mining::{ngrams_in, Phrases};
use crate::sent_embed::SentenceVector;

/// Incremental graph construction, one document at a time.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: SemanticGraph,
}

/// Lemma, entity and n-gram nodes occurring in a sentence.
fn token_nodes(sentence: &Sentence, phrases: &Phrases) -> BTreeSet<NodeKey> {
    let mut out = BTreeSet::new();
    for t in &sentence.tokens {
        if t.pos.is_interesting() {
            out.insert(NodeKey::new(NodeKind::Lemma, t.lemma.clone()));
        }
    }
    for e in &sentence.entities {
        out.insert(NodeKey::new(NodeKind::Entity, e.clone()));
    }
    for g in ngrams_in(sentence, phrases) {
        out.insert(NodeKey::new(NodeKind::Ngram, g));
    }
    out
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a document's sentence chain, occurrence edges, keyword terms and
    /// predicate nodes. `sentences` are that document's annotated sentences in
    /// index order.
    pub fn add_document(
        &mut self,
        doc: &Document,
        sentences: &[Sentence],
        phrases: &Phrases,
    ) -> Result<(), GraphError> {
        let g = &mut self.graph;
        let keys: Vec<NodeKey> = sentences
            .iter()
            .map(|s| NodeKey::try_new(NodeKind::Sentence, s.node_name()))
            .collect::<Result<_, _>>()?;
        let occurrences: Vec<BTreeSet<NodeKey>> =
            sentences.iter().map(|s| token_nodes(s, phrases)).collect();

        for key in &keys {
            g.add_node(key.clone());
        }
        for pair in keys.windows(2) {
            g.add_edge(pair[0].clone(), pair[1].clone())?;
        }
        for (key, occ) in keys.iter().zip(&occurrences) {
            for x in occ {
                g.add_edge(key.clone(), x.clone())?;
            }
        }
        for kw in &doc.keywords {
            let term = NodeKey::try_new(NodeKind::CodedTerm, kw.clone())?;
            g.add_node(term.clone());
            for key in &keys {
                g.add_edge(key.clone(), term.clone())?;
            }
        }
        for p in &doc.predicates {
            let pred = NodeKey::try_new(NodeKind::Predicate, p.triple_name())?;
            let subject = NodeKey::try_new(NodeKind::CodedTerm, p.subject_id.clone())?;
            let object = NodeKey::try_new(NodeKind::CodedTerm, p.object_id.clone())?;
            g.declare_term(subject.clone(), &p.subject_type);
            g.declare_term(object.clone(), &p.object_type);
            g.add_edge(pred.clone(), subject)?;
            g.add_edge(pred.clone(), object)?;
            let sources: Vec<usize> = match p.sentence {
                Some(i) if i < keys.len() => vec![i],
                Some(i) => {
                    log::warn!(
                        "document {}: predicate {} names sentence {i} of {}; linking all sentences",
                        doc.id,
                        p.triple_name(),
                        keys.len()
                    );
                    (0..keys.len()).collect()
                }
                None => (0..keys.len()).collect(),
            };
            for i in sources {
                g.add_edge(pred.clone(), keys[i].clone())?;
                for x in &occurrences[i] {
                    g.add_edge(pred.clone(), x.clone())?;
                }
            }
        }
        Ok(())
    }

    pub fn add_knn_edges<I>(&mut self, edges: I) -> Result<(), GraphError>
    where
        I: IntoIterator<Item = (NodeKey, NodeKey)>,
    {
        for (a, b) in edges {
            self.graph.add_edge(a, b)?;
        }
        Ok(())
    }

    pub fn finish(self) -> SemanticGraph {
        self.graph
    }
}

/// Builds the full graph. `sentences` must be grouped by document in
/// document order, as produced by corpus annotation.
pub fn build(
    docs: &[Document],
    sentences: &[Sentence],
    phrases: &Phrases,
    knn: &[(NodeKey, NodeKey)],
) -> Result<SemanticGraph, GraphError> {
    let mut builder = GraphBuilder::new();
    let mut rest = sentences;
    for doc in docs {
        let n = rest.iter().take_while(|s| s.doc_id == doc.id).count();
        let (mine, tail) = rest.split_at(n);
        if mine.is_empty() {
            log::warn!("document {} has no sentences", doc.id);
        }
        builder.add_document(doc, mine, phrases)?;
        rest = tail;
    }
    if !rest.is_empty() {
        log::warn!(
            "{} sentences do not follow document order and were ignored",
            rest.len()
        );
    }
    builder.add_knn_edges(knn.iter().cloned())?;
    Ok(builder.finish())
}

/// Nearest-neighbour sentence pairs from the ANN index, excluding each
/// sentence itself and empty (all-punctuation) sentences. Pairs are
/// normalised to (min, max) and deduplicated, so the union is symmetric.
pub fn knn_edges(
    index: &AnnIndex,
    vectors: &[SentenceVector],
    k: usize,
    nprobe: usize,
) -> Vec<(NodeKey, NodeKey)> {
    let per_query: Vec<Vec<(NodeKey, NodeKey)>> = vectors
        .par_iter()
        .filter(|v| !v.empty)
        .map(|v| {
            index
                .search(&v.values, k + 1, nprobe)
                .into_iter()
                .filter(|(key, _)| *key != v.key)
                .take(k)
                .map(|(key, _)| {
                    if key < v.key {
                        (key, v.key.clone())
                    } else {
                        (v.key.clone(), key)
                    }
                })
                .collect()
        })
        .collect();
    let set: BTreeSet<(NodeKey, NodeKey)> = per_query.into_iter().flatten().collect();
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotate_corpus, Lexicon, PredicateRecord};
    use chrono::NaiveDate;

    fn doc(id: &str, title: &str, abs: &str) -> Document {
        Document {
            id: id.into(),
            title: title.into(),
            abstract_text: abs.into(),
            date: NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
            language: "en".into(),
            keywords: vec![],
            predicates: vec![],
        }
    }

    fn k(s: &str) -> NodeKey {
        s.parse().unwrap()
    }

    #[test]
    fn sentence_chain() {
        let docs = vec![doc("d", "Title", "One. Two.")];
        let sents = annotate_corpus(&docs, &Lexicon::default());
        let g = build(&docs, &sents, &Phrases::new(), &[]).unwrap();
        let ss: Vec<(String, String)> = g
            .edges()
            .filter(|(a, b)| a.kind() == NodeKind::Sentence && b.kind() == NodeKind::Sentence)
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(
            ss,
            vec![
                ("s:d:0".to_string(), "s:d:1".to_string()),
                ("s:d:1".to_string(), "s:d:2".to_string())
            ]
        );
        assert!(g.contains(&k("l:title")));
        assert!(g.neighbors(&k("s:d:1")).unwrap().contains(&k("l:one")));
    }

    #[test]
    fn title_only_has_no_adjacency() {
        let docs = vec![doc("d", "Title", "")];
        let sents = annotate_corpus(&docs, &Lexicon::default());
        let g = build(&docs, &sents, &Phrases::new(), &[]).unwrap();
        assert!(g.edges().all(|(a, b)| !(a.kind() == NodeKind::Sentence && b.kind() == NodeKind::Sentence)));
        assert!(g.contains(&k("s:d:0")));
    }

    #[test]
    fn predicates_keywords_and_auto_created_terms() {
        let mut d = doc("d", "Kinase study", "Kinase binds receptor. Other text here.");
        d.keywords = vec!["K1".into()];
        d.predicates = vec![PredicateRecord {
            subject_id: "C1".into(),
            subject_type: "gngm".into(),
            verb: "binds".into(),
            object_id: "C2".into(),
            object_type: "aapp".into(),
            date: None,
            sentence: Some(1),
        }];
        let docs = vec![d];
        let sents = annotate_corpus(&docs, &Lexicon::default());
        let g = build(&docs, &sents, &Phrases::new(), &[]).unwrap();
        let p = k("p:C1:binds:C2");
        let ns: Vec<String> = g.neighbors(&p).unwrap().iter().map(|n| n.to_string()).collect();
        assert_eq!(
            ns,
            vec!["c:C1", "c:C2", "l:bind", "l:kinase", "l:receptor", "s:d:1"]
        );
        assert_eq!(g.semantic_type(&k("c:C2")), Some("aapp"));
        for i in 0..3 {
            assert!(g.neighbors(&k(&format!("s:d:{i}"))).unwrap().contains(&k("c:K1")));
        }
        assert_eq!(g.semantic_type(&k("c:K1")), None);
    }
}
