//! Planted-structure synthetic corpus.
//!
//! Terms are split into communities, each with its own genes, diseases and
//! vocabulary. Every gene is published with a fixed band of its community's
//! diseases before the cutoff; the remaining within-community gene-disease
//! pairs are first published after it. No predicate ever crosses
//! communities, so held-out pairs are recoverable from community structure
//! alone.

use std::collections::BTreeMap;
use std::io::{self, Write};

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Document, Lexicon, PredicateRecord};
use crate::util::seeded_rng;

pub const GENE_TYPE: &str = "gngm";
pub const DISEASE_TYPE: &str = "dsyn";

const VERBS: &[&str] = &["associated_with", "causes", "affects"];
const SHARED: &[&str] = &[
    "patients", "cohort", "analysis", "expression", "levels", "study", "samples", "results",
    "clinical", "biomarker", "response", "risk",
];
const VOCAB: &[&[&str]] = &[
    &[
        "kinase", "phosphorylation", "insulin", "glucose", "membrane", "transporter", "mitochondrial",
        "oxidative", "lipid", "hepatic", "metabolic", "adipose", "receptor", "uptake", "secretion",
    ],
    &[
        "neuron", "synapse", "cortex", "axon", "dendritic", "glial", "neurotransmitter", "plasticity",
        "hippocampal", "myelin", "neuronal", "cognitive", "seizure", "excitability", "cerebral",
    ],
    &[
        "lymphocyte", "cytokine", "antigen", "macrophage", "inflammatory", "antibody", "thymic",
        "interleukin", "autoimmune", "complement", "dendrite", "tolerance", "infiltration", "innate",
        "adaptive",
    ],
];
const ROOTS: &[&str] = &["Arden", "Belor", "Cavin", "Dusor", "Elvan", "Farro", "Galen", "Horvik"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub communities: usize,
    pub genes_per_community: usize,
    pub diseases_per_community: usize,
    /// Diseases each gene is published with before the cutoff.
    pub known_per_gene: usize,
    pub pre_docs: usize,
    pub post_docs: usize,
    pub cutoff: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            communities: 2,
            genes_per_community: 8,
            diseases_per_community: 8,
            known_per_gene: 4,
            pre_docs: 170,
            post_docs: 30,
            cutoff: NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTerm {
    pub id: String,
    pub name: String,
    pub semantic_type: &'static str,
    pub community: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub documents: Vec<Document>,
    pub lexicon: Lexicon,
    pub terms: Vec<SynthTerm>,
    /// (gene id, disease id) published before the cutoff.
    pub known_pairs: Vec<(String, String)>,
    /// (gene id, disease id) first published after the cutoff.
    pub held_out_pairs: Vec<(String, String)>,
}

impl SyntheticCorpus {
    pub fn community_of(&self, id: &str) -> Option<usize> {
        self.terms.iter().find(|t| t.id == id).map(|t| t.community)
    }

    /// Every (gene, disease) pair whose terms sit in different communities.
    pub fn cross_community_pairs(&self) -> Vec<(String, String)> {
        let genes = self.terms.iter().filter(|t| t.semantic_type == GENE_TYPE);
        let mut out = Vec::new();
        for g in genes {
            for d in self.terms.iter().filter(|t| t.semantic_type == DISEASE_TYPE) {
                if g.community != d.community {
                    out.push((g.id.clone(), d.id.clone()));
                }
            }
        }
        out
    }

    pub fn write_documents(&self, w: &mut dyn Write) -> io::Result<()> {
        for d in &self.documents {
            serde_json::to_writer(&mut *w, d)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_lexicon(&self, w: &mut dyn Write) -> io::Result<()> {
        serde_json::to_writer_pretty(&mut *w, &self.lexicon)?;
        writeln!(w)
    }

    /// TSV of (id, name, semantic type, community).
    pub fn write_terms(&self, w: &mut dyn Write) -> io::Result<()> {
        writeln!(w, "id\tname\ttype\tcommunity")?;
        for t in &self.terms {
            writeln!(w, "{}\t{}\t{}\t{}", t.id, t.name, t.semantic_type, t.community)?;
        }
        Ok(())
    }

    /// TSV of (gene id, disease id, status) with status `known` or `held_out`.
    pub fn write_truth(&self, w: &mut dyn Write) -> io::Result<()> {
        for (g, d) in &self.known_pairs {
            writeln!(w, "{g}\t{d}\tknown")?;
        }
        for (g, d) in &self.held_out_pairs {
            writeln!(w, "{g}\t{d}\theld_out")?;
        }
        Ok(())
    }
}

struct Community<'a> {
    genes: Vec<&'a SynthTerm>,
    diseases: Vec<&'a SynthTerm>,
    known: Vec<(usize, usize)>,
    held_out: Vec<(usize, usize)>,
}

fn make_terms(cfg: &SynthConfig) -> Vec<SynthTerm> {
    let mut terms = Vec::new();
    for c in 0..cfg.communities {
        let tag = (b'A' + c as u8) as char;
        for i in 0..cfg.genes_per_community {
            terms.push(SynthTerm {
                id: format!("G{tag}{i:02}"),
                name: format!("SG{tag}{i}"),
                semantic_type: GENE_TYPE,
                community: c,
            });
        }
        for i in 0..cfg.diseases_per_community {
            let root = ROOTS[i % ROOTS.len()];
            let suffix = ["oma", "itis", "osis"][c % 3];
            terms.push(SynthTerm {
                id: format!("D{tag}{i:02}"),
                name: format!("{root}{suffix} {} syndrome", (b'a' + (i / ROOTS.len()) as u8) as char),
                semantic_type: DISEASE_TYPE,
                community: c,
            });
        }
    }
    terms
}

fn sentence<R: Rng>(rng: &mut R, vocab: &[&str], mentions: &[&str]) -> String {
    let w = |rng: &mut R| *vocab.choose(rng).expect("nonempty vocabulary");
    let s = |rng: &mut R| *SHARED.choose(rng).expect("nonempty");
    let m = |rng: &mut R| *mentions.choose(rng).expect("nonempty mentions");
    let text = match rng.gen_range(0..5) {
        0 => format!("{} {} {} was increased in {} {}", m(rng), w(rng), w(rng), s(rng), w(rng)),
        1 => format!("We observed {} {} of {} in {} {}", w(rng), w(rng), m(rng), w(rng), s(rng)),
        2 => format!("{} {} and {} {} are linked to {}", w(rng), w(rng), w(rng), w(rng), m(rng)),
        3 => format!("The {} of {} showed {} {} {}", s(rng), m(rng), w(rng), w(rng), s(rng)),
        _ => format!("{} regulates {} {} in {}", m(rng), w(rng), w(rng), m(rng)),
    };
    let mut chars = text.chars();
    let first = chars.next().expect("nonempty").to_uppercase().collect::<String>();
    format!("{first}{}.", chars.as_str())
}

fn date_in<R: Rng>(rng: &mut R, year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, rng.gen_range(1..=12), rng.gen_range(1..=28)).expect("valid date")
}

fn predicate<R: Rng>(rng: &mut R, g: &SynthTerm, d: &SynthTerm) -> PredicateRecord {
    PredicateRecord {
        subject_id: g.id.clone(),
        subject_type: g.semantic_type.to_string(),
        verb: VERBS.choose(rng).expect("nonempty").to_string(),
        object_id: d.id.clone(),
        object_type: d.semantic_type.to_string(),
        date: None,
        sentence: None,
    }
}

/// A document about `pairs` (indices into the community's genes and
/// diseases), mentioning a few other community terms in passing.
fn document<R: Rng>(rng: &mut R, id: String, date: NaiveDate, c: usize, com: &Community<'_>, pairs: &[(usize, usize)]) -> Document {
    let vocab = VOCAB[c % VOCAB.len()];
    let mut mentions: Vec<&str> = Vec::new();
    let mut keywords = Vec::new();
    for &(g, d) in pairs {
        for t in [com.genes[g], com.diseases[d]] {
            if !keywords.contains(&t.id) {
                keywords.push(t.id.clone());
                mentions.push(&t.name);
            }
        }
    }
    for _ in 0..2 {
        let t = if rng.gen() { com.genes.choose(rng) } else { com.diseases.choose(rng) };
        mentions.push(&t.expect("nonempty community").name);
    }
    let (g0, d0) = pairs[0];
    let title = format!(
        "{} {} in {} {}",
        com.genes[g0].name,
        vocab.choose(rng).expect("nonempty"),
        com.diseases[d0].name,
        SHARED.choose(rng).expect("nonempty")
    );
    let n = rng.gen_range(3..=5);
    let abstract_text = (0..n).map(|_| sentence(rng, vocab, &mentions)).collect::<Vec<_>>().join(" ");
    Document {
        id,
        title,
        abstract_text,
        date,
        language: "en".to_string(),
        keywords,
        predicates: pairs.iter().map(|&(g, d)| predicate(rng, com.genes[g], com.diseases[d])).collect(),
    }
}

pub fn generate(cfg: &SynthConfig) -> SyntheticCorpus {
    assert!(cfg.communities >= 1 && cfg.communities <= 26, "1 to 26 communities");
    assert!(cfg.genes_per_community > 0 && cfg.diseases_per_community > 0);
    assert!(cfg.known_per_gene > 0 && cfg.known_per_gene < cfg.diseases_per_community);
    let mut rng = seeded_rng(cfg.seed, "synth");
    let terms = make_terms(cfg);
    let communities: Vec<Community<'_>> = (0..cfg.communities)
        .map(|c| {
            let genes: Vec<&SynthTerm> = terms.iter().filter(|t| t.community == c && t.semantic_type == GENE_TYPE).collect();
            let diseases: Vec<&SynthTerm> = terms.iter().filter(|t| t.community == c && t.semantic_type == DISEASE_TYPE).collect();
            let nd = diseases.len();
            let mut known = Vec::new();
            let mut held_out = Vec::new();
            for g in 0..genes.len() {
                for d in 0..nd {
                    if (d + nd - g % nd) % nd < cfg.known_per_gene {
                        known.push((g, d));
                    } else {
                        held_out.push((g, d));
                    }
                }
            }
            Community { genes, diseases, known, held_out }
        })
        .collect();

    let cutoff_year = cfg.cutoff.year();
    let mut documents = Vec::new();
    let mut next_id = 0usize;
    let mut new_id = || {
        next_id += 1;
        format!("SYN{next_id:04}")
    };

    for i in 0..cfg.pre_docs {
        let c = i % cfg.communities;
        let com = &communities[c];
        // Cycle through known pairs so each is published several times.
        let k = i / cfg.communities;
        let mut pairs = vec![com.known[k % com.known.len()]];
        if rng.gen_bool(0.5) {
            let extra = *com.known.choose(&mut rng).expect("nonempty");
            if extra != pairs[0] {
                pairs.push(extra);
            }
        }
        let year = rng.gen_range(cutoff_year - 5..cutoff_year);
        let date = date_in(&mut rng, year);
        documents.push(document(&mut rng, new_id(), date, c, com, &pairs));
    }

    // Each held-out pair appears in the final post-cutoff year, and every
    // other pair also a year earlier, so yearly counts never decrease.
    let mut post_items: Vec<(i32, usize, (usize, usize))> = Vec::new();
    for (c, com) in communities.iter().enumerate() {
        for (j, &p) in com.held_out.iter().enumerate() {
            post_items.push((cutoff_year + 1, c, p));
            if j % 2 == 0 {
                post_items.push((cutoff_year, c, p));
            }
        }
    }
    post_items.sort();
    let mut groups: BTreeMap<(i32, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for (y, c, p) in post_items {
        groups.entry((y, c)).or_default().push(p);
    }
    let total_post: usize = groups.values().map(Vec::len).sum();
    let per_doc = total_post.div_ceil(cfg.post_docs.max(1)).max(1);
    for ((year, c), pairs) in groups {
        for chunk in pairs.chunks(per_doc) {
            let date = date_in(&mut rng, year);
            documents.push(document(&mut rng, new_id(), date, c, &communities[c], chunk));
        }
    }

    let lexicon = Lexicon::default().with_entities(terms.iter().map(|t| t.name.clone()));
    let ids = |com: &Community<'_>, pairs: &[(usize, usize)]| -> Vec<(String, String)> {
        pairs.iter().map(|&(g, d)| (com.genes[g].id.clone(), com.diseases[d].id.clone())).collect()
    };
    let known_pairs = communities.iter().flat_map(|c| ids(c, &c.known)).collect();
    let held_out_pairs = communities.iter().flat_map(|c| ids(c, &c.held_out)).collect();
    SyntheticCorpus {
        config: cfg.clone(),
        documents,
        lexicon,
        terms,
        known_pairs,
        held_out_pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn predicates_stay_within_communities() {
        let s = generate(&SynthConfig::default());
        for d in &s.documents {
            for p in &d.predicates {
                assert_eq!(s.community_of(&p.subject_id), s.community_of(&p.object_id));
            }
        }
    }

    #[test]
    fn held_out_pairs_only_after_cutoff() {
        let s = generate(&SynthConfig::default());
        let held: BTreeSet<_> = s.held_out_pairs.iter().cloned().collect();
        let known: BTreeSet<_> = s.known_pairs.iter().cloned().collect();
        assert!(held.is_disjoint(&known));
        let mut seen_known = BTreeSet::new();
        let mut seen_held = BTreeSet::new();
        for d in &s.documents {
            for p in &d.predicates {
                let pair = (p.subject_id.clone(), p.object_id.clone());
                if d.date < s.config.cutoff {
                    assert!(known.contains(&pair));
                    seen_known.insert(pair);
                } else {
                    assert!(held.contains(&pair));
                    seen_held.insert(pair);
                }
            }
        }
        assert_eq!(seen_known, known);
        assert_eq!(seen_held, held);
    }

    #[test]
    fn size_and_determinism() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.documents, b.documents);
        let n = a.documents.len();
        assert!((180..=220).contains(&n), "{n} documents");
        assert_eq!(a.held_out_pairs.len(), 2 * 8 * 4);
        let mut buf = Vec::new();
        a.write_documents(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), n);
    }
}
