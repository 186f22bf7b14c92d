use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::document::{CorpusError, Document};
use super::split::{split_sentences, Sentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Propn,
    Adv,
    Intj,
    Other,
    Stop,
    Punct,
    Num,
}

impl Pos {
    /// Whether an n-gram may start or end on this tag.
    pub fn is_interesting(self) -> bool {
        matches!(
            self,
            Pos::Noun | Pos::Verb | Pos::Adj | Pos::Propn | Pos::Adv | Pos::Intj | Pos::Other
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub lemma: String,
    pub pos: Pos,
    pub is_entity_part: bool,
}

/// One row of the suffix table. A word ending in `suffix` with at least
/// `min_stem` characters before it is tagged `pos`; its lemma is the stem
/// plus `replace`, or the whole word when `replace` is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixRule {
    pub suffix: String,
    #[serde(default)]
    pub replace: Option<String>,
    pub pos: Pos,
    #[serde(default = "one")]
    pub min_stem: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub stopwords: BTreeSet<String>,
    /// Exact lowercase word (or lemma) to tag.
    #[serde(default)]
    pub dictionary: BTreeMap<String, Pos>,
    /// Tried in order; the first matching rule wins.
    #[serde(default)]
    pub suffix_rules: Vec<SuffixRule>,
    /// Multi-word entity names, matched case-insensitively on token surfaces.
    #[serde(default)]
    pub entities: Vec<String>,
}

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "before", "being", "between", "both", "but", "by", "can", "could", "did", "do", "does",
    "during", "each", "for", "from", "had", "has", "have", "here", "how", "if", "in", "into", "is",
    "it", "its", "may", "might", "more", "most", "no", "nor", "not", "of", "on", "or", "other",
    "our", "over", "should", "such", "than", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "those", "through", "to", "under", "upon", "via", "was", "we", "were",
    "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with", "within",
    "would",
];

const DEFAULT_DICTIONARY: &[(&str, Pos)] = &[
    ("activate", Pos::Verb),
    ("affect", Pos::Verb),
    ("associate", Pos::Verb),
    ("bind", Pos::Verb),
    ("block", Pos::Verb),
    ("cause", Pos::Verb),
    ("decrease", Pos::Verb),
    ("demonstrate", Pos::Verb),
    ("enhance", Pos::Verb),
    ("express", Pos::Verb),
    ("find", Pos::Verb),
    ("grow", Pos::Verb),
    ("identify", Pos::Verb),
    ("increase", Pos::Verb),
    ("induce", Pos::Verb),
    ("inhibit", Pos::Verb),
    ("interact", Pos::Verb),
    ("mediate", Pos::Verb),
    ("observe", Pos::Verb),
    ("promote", Pos::Verb),
    ("reduce", Pos::Verb),
    ("regulate", Pos::Verb),
    ("report", Pos::Verb),
    ("reveal", Pos::Verb),
    ("show", Pos::Verb),
    ("suggest", Pos::Verb),
    ("suppress", Pos::Verb),
    ("target", Pos::Verb),
    ("treat", Pos::Verb),
    ("trigger", Pos::Verb),
    ("use", Pos::Verb),
    ("high", Pos::Adj),
    ("low", Pos::Adj),
    ("new", Pos::Adj),
    ("novel", Pos::Adj),
    ("human", Pos::Adj),
    ("severe", Pos::Adj),
    ("chronic", Pos::Adj),
    ("acute", Pos::Adj),
    ("often", Pos::Adv),
    ("however", Pos::Adv),
    ("thus", Pos::Adv),
    ("indeed", Pos::Adv),
    ("oh", Pos::Intj),
    ("wow", Pos::Intj),
];

const DEFAULT_SUFFIXES: &[(&str, Option<&str>, Pos, usize)] = &[
    ("sses", Some("ss"), Pos::Noun, 1),
    ("ies", Some("y"), Pos::Noun, 2),
    ("ating", Some("ate"), Pos::Verb, 2),
    ("ated", Some("ate"), Pos::Verb, 2),
    ("izing", Some("ize"), Pos::Verb, 2),
    ("ized", Some("ize"), Pos::Verb, 2),
    ("ing", Some(""), Pos::Verb, 3),
    ("ed", Some(""), Pos::Verb, 3),
    ("ly", None, Pos::Adv, 3),
    ("tion", None, Pos::Noun, 2),
    ("ment", None, Pos::Noun, 2),
    ("ness", None, Pos::Noun, 2),
    ("ity", None, Pos::Noun, 2),
    ("ism", None, Pos::Noun, 2),
    ("ous", None, Pos::Adj, 2),
    ("ive", None, Pos::Adj, 2),
    ("able", None, Pos::Adj, 2),
    ("ful", None, Pos::Adj, 3),
    ("ical", None, Pos::Adj, 2),
    ("ic", None, Pos::Adj, 3),
    ("al", None, Pos::Adj, 3),
    ("ize", None, Pos::Verb, 2),
    ("ss", None, Pos::Noun, 1),
    ("us", None, Pos::Noun, 1),
    ("is", None, Pos::Noun, 2),
    ("s", Some(""), Pos::Noun, 2),
];

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            dictionary: DEFAULT_DICTIONARY
                .iter()
                .map(|(w, p)| (w.to_string(), *p))
                .collect(),
            suffix_rules: DEFAULT_SUFFIXES
                .iter()
                .map(|(suffix, replace, pos, min_stem)| SuffixRule {
                    suffix: suffix.to_string(),
                    replace: replace.map(str::to_string),
                    pos: *pos,
                    min_stem: *min_stem,
                })
                .collect(),
            entities: Vec::new(),
        }
    }
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn with_entities<I, S>(mut self, entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.entities.extend(entities.into_iter().map(Into::into));
        self
    }

    /// Lemma and tag for a single non-punctuation word.
    fn tag_word(&self, surface: &str) -> (String, Pos) {
        let lower = surface.to_lowercase();
        if self.stopwords.contains(&lower) {
            return (lower, Pos::Stop);
        }
        if let Some(&pos) = self.dictionary.get(&lower) {
            return (lower, pos);
        }
        let first = surface.chars().next().unwrap_or(' ');
        if first.is_ascii_digit() && surface.chars().all(|c| c.is_ascii_digit() || c == '.') {
            return (lower, Pos::Num);
        }
        if surface.chars().any(|c| c.is_alphabetic() && !c.is_ascii()) {
            return (lower, Pos::Other);
        }
        let upper = surface.chars().filter(|c| c.is_uppercase()).count();
        let has_digit = surface.chars().any(|c| c.is_ascii_digit());
        let has_alpha = surface.chars().any(|c| c.is_alphabetic());
        if upper >= 2 || (has_digit && has_alpha) {
            return (lower, Pos::Propn);
        }
        let n_chars = lower.chars().count();
        for rule in &self.suffix_rules {
            let suffix_len = rule.suffix.chars().count();
            if lower.ends_with(&rule.suffix) && n_chars >= suffix_len + rule.min_stem {
                let lemma = match &rule.replace {
                    Some(r) => format!("{}{}", &lower[..lower.len() - rule.suffix.len()], r),
                    None => lower.clone(),
                };
                let pos = self.dictionary.get(&lemma).copied().unwrap_or(rule.pos);
                return (lemma, pos);
            }
        }
        (lower, Pos::Noun)
    }
}

/// Splits text into word and punctuation pieces. Hyphens and apostrophes
/// between alphanumerics, and periods between digits, stay inside a word.
pub fn tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let mut j = i + 1;
            while j < chars.len() {
                let cj = chars[j].1;
                let joiner = matches!(cj, '-' | '\'')
                    && chars[j - 1].1.is_alphanumeric()
                    && chars.get(j + 1).is_some_and(|n| n.1.is_alphanumeric());
                let decimal = cj == '.'
                    && chars[j - 1].1.is_ascii_digit()
                    && chars.get(j + 1).is_some_and(|n| n.1.is_ascii_digit());
                if cj.is_alphanumeric() || joiner || decimal {
                    j += 1;
                } else {
                    break;
                }
            }
            let end = chars.get(j).map_or(text.len(), |x| x.0);
            out.push(&text[start..end]);
            i = j;
        } else {
            out.push(&text[start..start + c.len_utf8()]);
            i += 1;
        }
    }
    out
}

/// Annotates one sentence. Pure in (sentence text, lexicon).
pub fn annotate(sentence: &Sentence, lexicon: &Lexicon) -> Sentence {
    let pieces = tokenize(&sentence.text);
    let mut tokens: Vec<Token> = pieces
        .iter()
        .map(|&surface| {
            let is_word = surface.chars().next().is_some_and(char::is_alphanumeric);
            let (lemma, pos) = if is_word {
                lexicon.tag_word(surface)
            } else {
                (surface.to_string(), Pos::Punct)
            };
            Token {
                surface: surface.to_string(),
                lemma,
                pos,
                is_entity_part: false,
            }
        })
        .collect();

    let gazetteer: Vec<Vec<String>> = lexicon
        .entities
        .iter()
        .map(|e| tokenize(e).iter().map(|t| t.to_lowercase()).collect::<Vec<_>>())
        .filter(|e: &Vec<String>| !e.is_empty())
        .collect();
    let lowered: Vec<String> = tokens.iter().map(|t| t.surface.to_lowercase()).collect();
    let mut entities = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let best = gazetteer
            .iter()
            .filter(|e| lowered.len() - i >= e.len() && lowered[i..i + e.len()] == e[..])
            .map(Vec::len)
            .max();
        match best {
            Some(len) => {
                for t in &mut tokens[i..i + len] {
                    t.is_entity_part = true;
                }
                entities.push(lowered[i..i + len].join(" "));
                i += len;
            }
            None => i += 1,
        }
    }

    Sentence {
        doc_id: sentence.doc_id.clone(),
        index: sentence.index,
        text: sentence.text.clone(),
        tokens,
        entities,
    }
}

/// Splits and annotates every document. Documents are processed in parallel;
/// output order follows document order.
pub fn annotate_corpus(docs: &[Document], lexicon: &Lexicon) -> Vec<Sentence> {
    docs.par_iter()
        .flat_map_iter(|d| {
            split_sentences(d)
                .into_iter()
                .map(|s| annotate(&s, lexicon))
                .collect::<Vec<_>>()
        })
        .collect()
}
