use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, Write};

use chrono::{Datelike, NaiveDate};
use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    avg_precision_at, map_mrr, pr_auc, precision_at, reciprocal_rank, roc_auc, LabeledEntry,
    LabeledRanking, MetricError,
};
use crate::corpus::Document;

/// One dated predicate occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub subject: String,
    pub subject_type: String,
    pub object: String,
    pub object_type: String,
    pub date: NaiveDate,
    pub doc_id: String,
}

impl Observation {
    pub fn from_documents(docs: &[Document]) -> Vec<Observation> {
        docs.iter()
            .flat_map(|d| {
                d.predicates.iter().map(move |p| Observation {
                    subject: p.subject_id.clone(),
                    subject_type: p.subject_type.clone(),
                    object: p.object_id.clone(),
                    object_type: p.object_type.clone(),
                    date: p.date.unwrap_or(d.date),
                    doc_id: d.id.clone(),
                })
            })
            .collect()
    }

    /// (type pair, term pair). Same-type pairs are unordered, so both are
    /// put in ascending order.
    fn canonical(&self) -> ((String, String), (String, String)) {
        if self.subject_type == self.object_type && self.object < self.subject {
            (
                (self.subject_type.clone(), self.object_type.clone()),
                (self.object.clone(), self.subject.clone()),
            )
        } else {
            (
                (self.subject_type.clone(), self.object_type.clone()),
                (self.subject.clone(), self.object.clone()),
            )
        }
    }
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub subject: String,
    pub object: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubdomainSpec {
    pub type_pair: (String, String),
    pub positives: Vec<(String, String)>,
    pub candidates: Vec<Candidate>,
}

impl SubdomainSpec {
    pub fn same_type(&self) -> bool {
        self.type_pair.0 == self.type_pair.1
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.type_pair.0, self.type_pair.1)
    }
}

/// Selects the `top_types` most frequent post-cutoff type pairs and, within
/// each, up to `top_preds` newly published term pairs whose yearly document
/// counts never decrease, ranked by growth (last year minus first year), then
/// total count, then key. Candidates are all type-matching pairs among the
/// positive terms that were not published before the cutoff.
pub fn build_subdomain_benchmarks(
    pre: &[Observation],
    post: &[Observation],
    top_types: usize,
    top_preds: usize,
) -> Vec<SubdomainSpec> {
    if post.is_empty() {
        warn!("no post-cutoff predicates; no subdomain benchmarks");
        return Vec::new();
    }
    let known: BTreeSet<(String, String)> = pre.iter().map(|o| unordered(&o.subject, &o.object)).collect();
    let first_year = post.iter().map(|o| o.date.year()).min().expect("nonempty");
    let last_year = post.iter().map(|o| o.date.year()).max().expect("nonempty");
    let span = (last_year - first_year + 1) as usize;

    let mut type_counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    // type pair -> term pair -> year -> documents
    let mut docs: BTreeMap<(String, String), BTreeMap<(String, String), Vec<BTreeSet<&str>>>> = BTreeMap::new();
    for o in post {
        if o.subject == o.object {
            continue;
        }
        let (types, pair) = o.canonical();
        *type_counts.entry(types.clone()).or_default() += 1;
        let years = docs
            .entry(types)
            .or_default()
            .entry(pair)
            .or_insert_with(|| vec![BTreeSet::new(); span]);
        years[(o.date.year() - first_year) as usize].insert(&o.doc_id);
    }

    let mut ranked_types: Vec<((String, String), usize)> = type_counts.into_iter().collect();
    ranked_types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked_types.truncate(top_types);

    let mut specs = Vec::new();
    for (types, _) in ranked_types {
        let mut growing: Vec<((String, String), usize, usize)> = docs[&types]
            .iter()
            .filter(|(pair, _)| !known.contains(&unordered(&pair.0, &pair.1)))
            .filter_map(|(pair, years)| {
                let counts: Vec<usize> = years.iter().map(BTreeSet::len).collect();
                if counts.windows(2).any(|w| w[1] < w[0]) {
                    return None;
                }
                let growth = counts[counts.len() - 1] - counts[0];
                Some((pair.clone(), growth, counts.iter().sum()))
            })
            .collect();
        growing.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then_with(|| a.0.cmp(&b.0)));
        if growing.len() < top_preds {
            warn!(
                "subdomain {}-{}: {} qualifying predicates, fewer than {top_preds}",
                types.0,
                types.1,
                growing.len()
            );
        }
        growing.truncate(top_preds);
        if growing.is_empty() {
            continue;
        }
        let mut positives: Vec<(String, String)> = growing.into_iter().map(|(p, _, _)| p).collect();
        positives.sort();
        let positive_set: BTreeSet<&(String, String)> = positives.iter().collect();

        let mut pairs: Vec<(String, String)> = Vec::new();
        if types.0 == types.1 {
            let terms: BTreeSet<&String> = positives.iter().flat_map(|(a, b)| [a, b]).collect();
            let terms: Vec<&String> = terms.into_iter().collect();
            for i in 0..terms.len() {
                for j in i + 1..terms.len() {
                    pairs.push((terms[i].clone(), terms[j].clone()));
                }
            }
        } else {
            let subjects: BTreeSet<&String> = positives.iter().map(|(a, _)| a).collect();
            let objects: BTreeSet<&String> = positives.iter().map(|(_, b)| b).collect();
            for a in &subjects {
                for b in &objects {
                    if a != b {
                        pairs.push(((*a).clone(), (*b).clone()));
                    }
                }
            }
        }
        let candidates = pairs
            .into_iter()
            .filter(|(a, b)| !known.contains(&unordered(a, b)))
            .map(|pair| Candidate {
                label: positive_set.contains(&pair),
                subject: pair.0,
                object: pair.1,
            })
            .collect();
        specs.push(SubdomainSpec {
            type_pair: types,
            positives,
            candidates,
        });
    }
    specs
}

fn entry(c: &Candidate, scores: &HashMap<(String, String), f64>) -> (LabeledEntry, bool) {
    let score = scores.get(&(c.subject.clone(), c.object.clone())).copied();
    (
        LabeledEntry {
            key: format!("{}\t{}", c.subject, c.object),
            score: score.unwrap_or(0.0),
            label: c.label,
        },
        score.is_some(),
    )
}

/// One query per positive-side term: the candidates with that term as
/// subject (either side for same-type subdomains).
pub fn one_to_many_queries(
    spec: &SubdomainSpec,
    scores: &HashMap<(String, String), f64>,
) -> Result<Vec<LabeledRanking>, MetricError> {
    let mut groups: BTreeMap<&str, Vec<LabeledEntry>> = BTreeMap::new();
    for c in &spec.candidates {
        let (e, _) = entry(c, scores);
        groups.entry(&c.subject).or_default().push(e.clone());
        if spec.same_type() {
            groups.entry(&c.object).or_default().push(e);
        }
    }
    let query_terms: BTreeSet<&str> = spec
        .positives
        .iter()
        .flat_map(|(a, b)| if spec.same_type() { vec![a.as_str(), b.as_str()] } else { vec![a.as_str()] })
        .collect();
    groups
        .into_iter()
        .filter(|(t, _)| query_terms.contains(t))
        .map(|(_, entries)| LabeledRanking::new(entries))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainReport {
    pub name: String,
    pub positives: usize,
    pub candidates: usize,
    /// Candidates without a score; they rank as 0.
    pub unscored: usize,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub rr: f64,
    /// No positive anywhere in the ranking, so `rr` is reported as 0.
    pub rr_flagged: bool,
    /// (k, P@k, AP@k, MAP@k, MRR@k)
    pub at_k: Vec<(usize, f64, f64, f64, f64)>,
}

pub fn evaluate_subdomain(
    spec: &SubdomainSpec,
    scores: &HashMap<(String, String), f64>,
    ks: &[usize],
) -> Result<SubdomainReport, MetricError> {
    let mut unscored = 0;
    let entries = spec
        .candidates
        .iter()
        .map(|c| {
            let (e, scored) = entry(c, scores);
            if !scored {
                unscored += 1;
            }
            e
        })
        .collect();
    let r = LabeledRanking::new(entries)?;
    let queries = one_to_many_queries(spec, scores)?;
    let mut at_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let (map, mrr) = if queries.is_empty() { (0.0, 0.0) } else { map_mrr(&queries, k)? };
        at_k.push((k, precision_at(&r, k)?, avg_precision_at(&r, k)?, map, mrr));
    }
    let rr = reciprocal_rank(&r);
    Ok(SubdomainReport {
        name: spec.name(),
        positives: spec.positives.len(),
        candidates: spec.candidates.len(),
        unscored,
        roc_auc: roc_auc(&r).ok(),
        pr_auc: pr_auc(&r).ok(),
        rr: rr.unwrap_or(0.0),
        rr_flagged: rr.is_none(),
        at_k,
    })
}

pub fn write_benchmarks(w: &mut dyn Write, specs: &[SubdomainSpec]) -> io::Result<()> {
    for s in specs {
        serde_json::to_writer(&mut *w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_benchmarks<R: BufRead>(r: R) -> io::Result<Vec<SubdomainSpec>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(s: &str, st: &str, o: &str, ot: &str, date: &str, doc: &str) -> Observation {
        Observation {
            subject: s.into(),
            subject_type: st.into(),
            object: o.into(),
            object_type: ot.into(),
            date: date.parse().unwrap(),
            doc_id: doc.into(),
        }
    }

    #[test]
    fn single_type_pair_selected() {
        let post = vec![
            obs("g1", "gngm", "d1", "dsyn", "2016-01-01", "x1"),
            obs("g2", "gngm", "d2", "dsyn", "2016-05-01", "x2"),
        ];
        let specs = build_subdomain_benchmarks(&[], &post, 20, 100);
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].type_pair, ("gngm".to_string(), "dsyn".to_string()));
        assert_eq!(specs[0].candidates.len(), 4);
        assert_eq!(specs[0].candidates.iter().filter(|c| c.label).count(), 2);
    }

    #[test]
    fn decreasing_pairs_excluded_and_known_pairs_removed() {
        let pre = vec![obs("g1", "gngm", "d2", "dsyn", "2010-01-01", "p1")];
        let post = vec![
            obs("g1", "gngm", "d1", "dsyn", "2016-01-01", "a"),
            obs("g1", "gngm", "d1", "dsyn", "2016-02-01", "b"),
            obs("g1", "gngm", "d1", "dsyn", "2017-01-01", "c"),
            obs("g2", "gngm", "d2", "dsyn", "2016-01-01", "d"),
            obs("g2", "gngm", "d2", "dsyn", "2017-01-01", "e"),
            obs("g3", "gngm", "d1", "dsyn", "2017-01-01", "f"),
        ];
        let specs = build_subdomain_benchmarks(&pre, &post, 20, 100);
        let s = &specs[0];
        let pos: Vec<(&str, &str)> = s.positives.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        assert_eq!(pos, [("g2", "d2"), ("g3", "d1")]);
        assert!(s.candidates.iter().all(|c| !(c.subject == "g1" && c.object == "d2")));
    }

    #[test]
    fn ranking_by_growth() {
        let mut post = Vec::new();
        // g1-d1 grows 1 -> 3, g2-d2 flat 2 -> 2, g3-d3 grows 0 -> 1.
        for (doc, year) in [("a", 2016), ("b", 2017), ("c", 2017), ("d", 2017)] {
            post.push(obs("g1", "gngm", "d1", "dsyn", &format!("{year}-03-01"), doc));
        }
        for (doc, year) in [("e", 2016), ("f", 2016), ("g", 2017), ("h", 2017)] {
            post.push(obs("g2", "gngm", "d2", "dsyn", &format!("{year}-03-01"), doc));
        }
        post.push(obs("g3", "gngm", "d3", "dsyn", "2017-05-05", "i"));
        let specs = build_subdomain_benchmarks(&[], &post, 1, 2);
        let pos: Vec<&str> = specs[0].positives.iter().map(|(a, _)| a.as_str()).collect();
        assert_eq!(pos, ["g1", "g3"]);
    }

    /// Exhaustive oracle: enumerate every pair of every type, check each
    /// condition separately.
    fn oracle(pre: &[Observation], post: &[Observation], top_types: usize, top_preds: usize) -> Vec<(String, String, BTreeSet<(String, String, bool)>)> {
        let mut type_count: HashMap<(String, String), usize> = HashMap::new();
        for o in post {
            *type_count.entry(o.canonical().0).or_default() += 1;
        }
        let mut types: Vec<_> = type_count.into_iter().collect();
        types.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let y0 = post.iter().map(|o| o.date.year()).min().unwrap();
        let y1 = post.iter().map(|o| o.date.year()).max().unwrap();
        let published_pre = |a: &str, b: &str| pre.iter().any(|o| (o.subject == a && o.object == b) || (o.subject == b && o.object == a));
        let mut out = Vec::new();
        for ((ta, tb), _) in types.into_iter().take(top_types) {
            let pairs: BTreeSet<(String, String)> = post
                .iter()
                .filter(|o| o.canonical().0 == (ta.clone(), tb.clone()))
                .map(|o| o.canonical().1)
                .collect();
            let mut scored = Vec::new();
            for (a, b) in pairs {
                if published_pre(&a, &b) {
                    continue;
                }
                let counts: Vec<usize> = (y0..=y1)
                    .map(|y| {
                        post.iter()
                            .filter(|o| o.date.year() == y && o.canonical() == ((ta.clone(), tb.clone()), (a.clone(), b.clone())))
                            .map(|o| o.doc_id.clone())
                            .collect::<BTreeSet<_>>()
                            .len()
                    })
                    .collect();
                let ok = (1..counts.len()).all(|i| counts[i] >= counts[i - 1]);
                if ok {
                    scored.push((counts[counts.len() - 1] - counts[0], counts.iter().sum::<usize>(), a, b));
                }
            }
            scored.sort_by(|x, y| y.0.cmp(&x.0).then(y.1.cmp(&x.1)).then((&x.2, &x.3).cmp(&(&y.2, &y.3))));
            let pos: BTreeSet<(String, String)> = scored.into_iter().take(top_preds).map(|s| (s.2, s.3)).collect();
            if pos.is_empty() {
                continue;
            }
            let all_terms: BTreeSet<String> = pos.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
            let mut cands = BTreeSet::new();
            for a in &all_terms {
                for b in &all_terms {
                    let side_ok = if ta == tb {
                        a < b
                    } else {
                        pos.iter().any(|p| &p.0 == a) && pos.iter().any(|p| &p.1 == b) && a != b
                    };
                    if side_ok && !published_pre(a, b) {
                        cands.insert((a.clone(), b.clone(), pos.contains(&(a.clone(), b.clone()))));
                    }
                }
            }
            out.push((ta, tb, cands));
        }
        out
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let types = ["gngm", "dsyn", "phsu"];
        let mut all = Vec::new();
        for i in 0..500 {
            let ts = types[rng.gen_range(0..3)];
            let to = types[rng.gen_range(0..3)];
            let s = format!("{ts}{}", rng.gen_range(0..12));
            let mut o = format!("{to}{}", rng.gen_range(0..12));
            if o == s {
                o.push('x');
            }
            let date = format!("{}-06-01", rng.gen_range(2010..2020));
            all.push(obs(&s, ts, &o, to, &date, &format!("doc{}", i / 2)));
        }
        let cutoff: NaiveDate = "2015-01-01".parse().unwrap();
        let (pre, post): (Vec<_>, Vec<_>) = all.into_iter().partition(|o| o.date < cutoff);
        for (tt, tp) in [(20, 100), (3, 5), (1, 2)] {
            let got = build_subdomain_benchmarks(&pre, &post, tt, tp);
            let want = oracle(&pre, &post, tt, tp);
            assert_eq!(got.len(), want.len());
            for (g, (ta, tb, cands)) in got.iter().zip(want) {
                assert_eq!(g.type_pair, (ta, tb));
                let gc: BTreeSet<(String, String, bool)> =
                    g.candidates.iter().map(|c| (c.subject.clone(), c.object.clone(), c.label)).collect();
                assert_eq!(gc.len(), g.candidates.len());
                assert_eq!(gc, cands);
            }
        }
    }

    #[test]
    fn evaluation_and_queries() {
        let post = vec![
            obs("g1", "gngm", "d1", "dsyn", "2016-01-01", "a"),
            obs("g2", "gngm", "d2", "dsyn", "2016-01-01", "b"),
        ];
        let spec = &build_subdomain_benchmarks(&[], &post, 1, 10)[0];
        let mut scores = HashMap::new();
        scores.insert(("g1".to_string(), "d1".to_string()), 0.9);
        scores.insert(("g1".to_string(), "d2".to_string()), 0.1);
        scores.insert(("g2".to_string(), "d2".to_string()), 0.8);
        let rep = evaluate_subdomain(spec, &scores, &[1, 10]).unwrap();
        assert_eq!(rep.unscored, 1);
        assert_eq!(rep.roc_auc, Some(1.0));
        assert_eq!(rep.at_k[0], (1, 1.0, 1.0, 1.0, 1.0));
        let q = one_to_many_queries(spec, &scores).unwrap();
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn benchmark_roundtrip() {
        let post = vec![obs("a", "t", "b", "t", "2016-01-01", "x"), obs("c", "t", "b", "t", "2016-01-01", "y")];
        let specs = build_subdomain_benchmarks(&[], &post, 5, 5);
        assert_eq!(specs[0].positives, vec![("a".to_string(), "b".to_string()), ("b".to_string(), "c".to_string())]);
        let mut buf = Vec::new();
        write_benchmarks(&mut buf, &specs).unwrap();
        assert_eq!(read_benchmarks(&buf[..]).unwrap(), specs);
    }
}
