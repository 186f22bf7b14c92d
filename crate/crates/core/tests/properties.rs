//! Property tests for cross-module invariants.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use hypogen::ann::{AnnIndex, AnnParams};
use hypogen::corpus::{annotate, ingest, split_sentences, Document, IngestOptions, Lexicon, PredicateRecord, Sentence};
use hypogen::evalharness::{
    avg_precision_at, map_mrr, pr_auc, precision_at, reciprocal_rank, reciprocal_rank_at, roc_auc, LabeledEntry,
    LabeledRanking,
};
use hypogen::graph::{build, edge_allowed, NodeKey, NodeKind};
use hypogen::hetembed::{edge_loss, edge_loss_grad, EmbeddingStore, NegativeBatch};
use hypogen::phrase_mining::Phrases;
use hypogen::ranker::{margin_loss, score_sample, ModelConfig, PredicateSample, RankingModel, SampleKind};
use hypogen::sent_embed::embed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "insulin", "receptor", "binds", "the", "kinase", "of", "tumor", "growth", "was", "reduced", "in", "mice",
    "signaling", "and", "novel", "protein", "expression", "increased", "cells", "pathway",
];
const TERMS: &[&str] = &["C01", "C02", "C03", "C04", "C05", "C06"];

fn cutoff() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()
}

fn words(idx: &[usize]) -> String {
    idx.iter().map(|i| WORDS[i % WORDS.len()]).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
struct DocSpec {
    title: Vec<usize>,
    sentences: Vec<Vec<usize>>,
    day_offset: i64,
    english: bool,
    keywords: Vec<usize>,
    predicates: Vec<(usize, usize)>,
}

fn doc_spec() -> impl Strategy<Value = DocSpec> {
    (
        prop::collection::vec(0usize..20, 1..6),
        prop::collection::vec(prop::collection::vec(0usize..20, 1..8), 0..4),
        -2000i64..400,
        prop::bool::weighted(0.85),
        prop::collection::vec(0usize..6, 0..2),
        prop::collection::vec((0usize..6, 0usize..6), 0..3),
    )
        .prop_map(|(title, sentences, day_offset, english, keywords, predicates)| DocSpec {
            title,
            sentences,
            day_offset,
            english,
            keywords,
            predicates,
        })
}

fn to_documents(specs: &[DocSpec]) -> Vec<Document> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| Document {
            id: format!("doc{i}"),
            title: format!("{} study", words(&s.title)),
            abstract_text: s.sentences.iter().map(|w| format!("{} here.", words(w))).collect::<Vec<_>>().join(" "),
            date: cutoff() + chrono::Duration::days(s.day_offset),
            language: if s.english { "en" } else { "fr" }.to_string(),
            keywords: s.keywords.iter().map(|k| TERMS[*k].to_string()).collect(),
            predicates: s
                .predicates
                .iter()
                .filter(|(a, b)| a != b)
                .map(|(a, b)| PredicateRecord {
                    subject_id: TERMS[*a].to_string(),
                    subject_type: "gngm".into(),
                    verb: "treats".into(),
                    object_id: TERMS[*b].to_string(),
                    object_type: "dsyn".into(),
                    date: None,
                    sentence: None,
                })
                .collect(),
        })
        .collect()
}

fn jsonl(docs: &[Document]) -> String {
    docs.iter().map(|d| serde_json::to_string(d).unwrap() + "\n").collect()
}

fn annotate_all(docs: &[Document], lexicon: &Lexicon) -> Vec<Sentence> {
    docs.iter().flat_map(|d| split_sentences(d)).map(|s| annotate(&s, lexicon)).collect()
}

fn store_with(keys: Vec<NodeKey>, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingStore {
    let mut store = EmbeddingStore::init(keys.clone(), dim, rng.gen());
    for k in &keys {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.set(k, &v).unwrap();
    }
    for kinds in store.translations().keys().cloned().collect::<Vec<_>>() {
        for x in store.translation_mut(kinds.0, kinds.1).unwrap() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    store
}

fn ranking(raw: &[(u8, bool)], f: impl Fn(f64) -> f64) -> LabeledRanking {
    LabeledRanking::new(
        raw.iter()
            .enumerate()
            .map(|(i, (s, l))| LabeledEntry {
                key: format!("k{i:03}"),
                score: f(f64::from(*s) / 4.0),
                label: *l,
            })
            .collect(),
    )
    .unwrap()
}

fn two_class(raw: &[(u8, bool)]) -> bool {
    raw.iter().any(|x| x.1) && raw.iter().any(|x| !x.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ingest_holds_out_and_is_idempotent(specs in prop::collection::vec(doc_spec(), 0..12)) {
        let docs = to_documents(&specs);
        let opts = IngestOptions::new(cutoff());
        let out = ingest(jsonl(&docs).as_bytes(), &opts).unwrap();
        prop_assert!(out.corpus.iter().all(|d| d.date < cutoff()));
        prop_assert!(out.held_out.iter().all(|d| d.date >= cutoff()));
        let order: Vec<&str> = docs.iter().map(|d| d.id.as_str()).filter(|id| out.corpus.iter().any(|c| c.id == *id)).collect();
        prop_assert_eq!(order, out.corpus.iter().map(|d| d.id.as_str()).collect::<Vec<_>>());
        let again = ingest(jsonl(&out.corpus).as_bytes(), &opts).unwrap();
        prop_assert_eq!(again.corpus, out.corpus);
        prop_assert!(again.held_out.is_empty());
    }

    #[test]
    fn title_is_sentence_zero_and_annotation_is_deterministic(specs in prop::collection::vec(doc_spec(), 1..6)) {
        let lexicon = Lexicon::default();
        for doc in to_documents(&specs) {
            let sentences = split_sentences(&doc);
            prop_assert_eq!(&sentences[0].text, &doc.title);
            prop_assert_eq!(sentences[0].index, 0);
            for s in &sentences {
                prop_assert_eq!(annotate(s, &lexicon), annotate(s, &lexicon));
            }
        }
    }

    #[test]
    fn sentence_vectors_are_unit_and_deterministic(spec in doc_spec(), dim in 8usize..64, seed in any::<u64>()) {
        let lexicon = Lexicon::default();
        let doc = &to_documents(&[spec])[0];
        for s in annotate_all(std::slice::from_ref(doc), &lexicon) {
            let v = embed(&s, dim, seed).unwrap();
            prop_assert_eq!(&v, &embed(&s, dim, seed).unwrap());
            if !v.empty {
                let norm: f64 = v.values.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-6, "norm {}", norm);
            }
        }
    }

    #[test]
    fn graph_respects_schema_and_chain(specs in prop::collection::vec(doc_spec(), 1..8)) {
        let lexicon = Lexicon::default();
        let docs = to_documents(&specs);
        let sentences = annotate_all(&docs, &lexicon);
        let g = build(&docs, &sentences, &Phrases::new(), &[]).unwrap();
        for (a, b) in g.edges() {
            prop_assert!(edge_allowed(a.kind(), b.kind()), "{} -- {}", a, b);
        }
        for s in &sentences {
            if s.index == 0 {
                continue;
            }
            let key = NodeKey::new(NodeKind::Sentence, s.node_name());
            let chain = g.neighbors(&key).unwrap().iter().filter(|n| n.kind() == NodeKind::Sentence).count();
            prop_assert!((1..=2).contains(&chain), "{} has {} chain neighbours", key, chain);
        }
        let co_occur: BTreeSet<(String, String)> = docs
            .iter()
            .flat_map(|d| d.predicates.iter())
            .flat_map(|p| [(p.subject_id.clone(), p.object_id.clone()), (p.object_id.clone(), p.subject_id.clone())])
            .collect();
        let terms: Vec<NodeKey> = g.nodes_of_kind(NodeKind::CodedTerm).cloned().collect();
        for a in &terms {
            for b in &terms {
                if a == b {
                    continue;
                }
                let ga = g.gamma(a).unwrap_or_default();
                let gb = g.gamma(b).unwrap_or_default();
                let shared = ga.intersection(&gb).next().is_some();
                prop_assert_eq!(shared, co_occur.contains(&(a.name().to_string(), b.name().to_string())));
            }
        }
    }

    #[test]
    fn metrics_ignore_order_preserving_transforms(raw in prop::collection::vec((0u8..12, any::<bool>()), 2..40)) {
        prop_assume!(two_class(&raw));
        let base = ranking(&raw, |x| x);
        let moved = ranking(&raw, |x| x * x * x + 2.0 * x - 7.0);
        prop_assert_eq!(roc_auc(&base).unwrap(), roc_auc(&moved).unwrap());
        prop_assert_eq!(pr_auc(&base).unwrap(), pr_auc(&moved).unwrap());
        prop_assert_eq!(reciprocal_rank(&base), reciprocal_rank(&moved));
        for k in [1, 3, 10, 50] {
            prop_assert_eq!(precision_at(&base, k).unwrap(), precision_at(&moved, k).unwrap());
            prop_assert_eq!(avg_precision_at(&base, k).unwrap(), avg_precision_at(&moved, k).unwrap());
            prop_assert_eq!(reciprocal_rank_at(&base, k).unwrap(), reciprocal_rank_at(&moved, k).unwrap());
        }
    }

    #[test]
    fn metrics_lie_in_unit_interval(queries in prop::collection::vec(prop::collection::vec((0u8..12, any::<bool>()), 2..30), 1..6), k in 1usize..40) {
        let rankings: Vec<LabeledRanking> = queries.iter().map(|q| ranking(q, |x| x)).collect();
        let (map, mrr) = map_mrr(&rankings, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&map) && (0.0..=1.0).contains(&mrr));
        for (q, r) in queries.iter().zip(&rankings) {
            for v in [precision_at(r, k).unwrap(), avg_precision_at(r, k).unwrap(), reciprocal_rank_at(r, k).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if two_class(q) {
                prop_assert!((0.0..=1.0).contains(&roc_auc(r).unwrap()));
                prop_assert!((0.0..=1.0).contains(&pr_auc(r).unwrap()));
            }
        }
    }

    #[test]
    fn margin_loss_zero_iff_negatives_trail(pos in -2.0f64..2.0, negs in prop::collection::vec(-2.0f64..2.0, 40)) {
        let m = 0.1;
        let loss = margin_loss(pos, &negs[..10], &negs[10..], m);
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, negs.iter().all(|n| pos - n >= m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ann_results_sorted_distinct_and_compact(seed in any::<u64>(), k in 1usize..40, nprobe in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 16;
        let items: Vec<(NodeKey, Vec<f32>)> = (0..300)
            .map(|i| (NodeKey::new(NodeKind::Sentence, format!("v:{i}")), (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
            .collect();
        let vecs: Vec<Vec<f32>> = items.iter().map(|(_, v)| v.clone()).collect();
        let params = AnnParams { m: Some(4), nlist: 8, nprobe, k, iters: 5 };
        let mut index = AnnIndex::train(&vecs, &params, 1.0, seed).unwrap();
        index.add(&items).unwrap();
        for b in 0..8 {
            prop_assert!(index.bucket(b).iter().all(|(_, code)| code.len() == 4));
        }
        let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let hits = index.search(&q, k, nprobe);
        prop_assert!(hits.windows(2).all(|w| w[0].1 <= w[1].1));
        let keys: BTreeSet<&NodeKey> = hits.iter().map(|(key, _)| key).collect();
        prop_assert_eq!(keys.len(), hits.len());
    }

    #[test]
    fn edge_gradient_matches_finite_differences(seed in any::<u64>(), dim in 2usize..6, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences: Vec<NodeKey> = (0..4).map(|i| NodeKey::new(NodeKind::Sentence, format!("d:{i}"))).collect();
        let preds: Vec<NodeKey> = (0..4).map(|i| NodeKey::new(NodeKind::Predicate, format!("A:r:B{i}"))).collect();
        let mut store = store_with(sentences.iter().chain(&preds).cloned().collect(), dim, &mut rng);
        let edge = (sentences[0].clone(), preds[0].clone());
        let negs = NegativeBatch {
            pairs: (0..k).map(|_| (sentences[0].clone(), preds.choose(&mut rng).unwrap().clone())).collect(),
        };
        let (_, grad) = edge_loss_grad(&store, &edge, &negs).unwrap();
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for key in store.keys().to_vec() {
            let i = store.index_of(&key).unwrap();
            let base = store.get(&key).unwrap().to_vec();
            for d in 0..dim {
                let mut v = base.clone();
                v[d] += h;
                store.set(&key, &v).unwrap();
                let up = edge_loss(&store, &edge, &negs).unwrap();
                v[d] = base[d] - h;
                store.set(&key, &v).unwrap();
                let down = edge_loss(&store, &edge, &negs).unwrap();
                store.set(&key, &base).unwrap();
                numeric.push((up - down) / (2.0 * h));
                analytic.push(grad.nodes.get(&i).map_or(0.0, |g| g[d]));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        prop_assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn sample_score_is_permutation_invariant(seed in any::<u64>(), n in 3usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let keys: Vec<NodeKey> = (0..20).map(|i| NodeKey::new(NodeKind::Predicate, format!("A:r:B{i}"))).collect();
        let store = store_with(keys.clone(), dim, &mut rng);
        let cfg = ModelConfig { input_dim: dim, model_dim: 8, ff_dim: 16, heads: 2, layers: 2, dropout: 0.0 };
        let model = RankingModel::new(cfg, seed).unwrap();
        let mut sample = PredicateSample { kind: SampleKind::Positive, elements: keys.choose_multiple(&mut rng, n).cloned().collect() };
        let base = score_sample(&model, &store, &sample).unwrap();
        sample.elements.shuffle(&mut rng);
        let moved = score_sample(&model, &store, &sample).unwrap();
        prop_assert!((base - moved).abs() < 1e-5);
    }
}
