use serde::{Deserialize, Serialize};

use super::annotate::Token;
use super::document::Document;

/// Tokens ending in a terminator that do not end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "al.", "approx.", "ca.", "cf.", "dr.", "e.g.", "eq.", "fig.", "figs.", "i.e.", "mr.", "mrs.",
    "ms.", "no.", "prof.", "ref.", "refs.", "resp.", "st.", "vol.", "vs.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    /// Position within the document; 0 is the title.
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<Token>,
    /// Gazetteer entities matched in this sentence, in order of occurrence.
    #[serde(default)]
    pub entities: Vec<String>,
}

impl Sentence {
    pub fn node_name(&self) -> String {
        format!("{}:{}", self.doc_id, self.index)
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_abbreviation(word: &str) -> bool {
    let lower = word.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Splits abstract text at a terminator followed by whitespace and an
/// uppercase letter or digit, unless the terminated word is a known
/// abbreviation.
fn split_text(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if is_terminator(c) {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let boundary = j > i + 1
                && j < chars.len()
                && (chars[j].1.is_uppercase() || chars[j].1.is_ascii_digit());
            if boundary {
                let end = pos + c.len_utf8();
                let word_start = text[..end]
                    .rfind(char::is_whitespace)
                    .map_or(0, |w| w + text[w..].chars().next().map_or(1, char::len_utf8));
                if !is_abbreviation(&text[word_start..end]) {
                    let piece = text[start..end].trim();
                    if !piece.is_empty() {
                        out.push(piece);
                    }
                    start = chars[j].0;
                    i = j;
                    continue;
                }
            }
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Splits a document into sentences; element 0 is always the title.
pub fn split_sentences(doc: &Document) -> Vec<Sentence> {
    let mut texts = vec![doc.title.trim()];
    texts.extend(split_text(&doc.abstract_text));
    texts
        .into_iter()
        .enumerate()
        .map(|(index, text)| Sentence {
            doc_id: doc.id.clone(),
            index,
            text: text.to_string(),
            tokens: Vec::new(),
            entities: Vec::new(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use regex::Regex;

    fn doc(title: &str, abs: &str) -> Document {
        Document {
            id: "d".into(),
            title: title.into(),
            abstract_text: abs.into(),
            date: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            language: "en".into(),
            keywords: vec![],
            predicates: vec![],
        }
    }

    fn squash(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    #[test]
    fn two_terminators_three_sentences() {
        let s = split_sentences(&doc("T", "A one. A two."));
        let texts: Vec<&str> = s.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["T", "A one.", "A two."]);
        assert_eq!(s.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_abstract_is_title_only() {
        let s = split_sentences(&doc("Title here", ""));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].text, "Title here");
    }

    #[test]
    fn abbreviations_and_lowercase_do_not_split() {
        let s = split_sentences(&doc(
            "T",
            "Smith et al. Showed this. Values e.g. Ten were seen. it is. ok? Yes! 5 more.",
        ));
        let texts: Vec<&str> = s.iter().skip(1).map(|s| s.text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                "Smith et al. Showed this.",
                "Values e.g. Ten were seen. it is. ok?",
                "Yes!",
                "5 more."
            ]
        );
    }

    #[test]
    fn decimal_numbers_do_not_split() {
        let s = split_sentences(&doc("T", "The dose was 3.5 mg. Next one."));
        assert_eq!(s.len(), 3);
    }

    // Independent regex oracle applying the same rule set.
    fn oracle_count(abs: &str) -> usize {
        if abs.trim().is_empty() {
            return 1;
        }
        let boundary = Regex::new(r"[.!?]\s+[\p{Lu}0-9]").unwrap();
        let last_word = Regex::new(r"(\S+)$").unwrap();
        let mut n = 1;
        for m in boundary.find_iter(abs) {
            let prefix = &abs[..m.start() + 1];
            let word = last_word.captures(prefix).unwrap()[1].to_lowercase();
            if !ABBREVIATIONS.contains(&word.as_str()) {
                n += 1;
            }
        }
        n + 1
    }

    #[test]
    fn synthetic_corpus_matches_regex_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let words = [
            "cells", "Protein", "grow", "e.g.", "Fig.", "al.", "3.5", "vs.", "binds", "DNA", "x",
            "Kinase", "12", "ok",
        ];
        let terms = [".", "!", "?", ".", ""];
        for _ in 0..200 {
            let n_sent = rng.gen_range(0..6);
            let mut abs = String::new();
            for _ in 0..n_sent {
                let n_words = rng.gen_range(1..7);
                let sent: Vec<&str> = (0..n_words).map(|_| *words.choose(&mut rng).unwrap()).collect();
                abs.push_str(&sent.join(" "));
                abs.push_str(terms.choose(&mut rng).unwrap());
                abs.push_str(if rng.gen_bool(0.5) { " " } else { "  \n" });
            }
            let d = doc("Title", &abs);
            let sents = split_sentences(&d);
            assert_eq!(sents.len(), oracle_count(&abs), "abstract {abs:?}");
            assert_eq!(sents[0].text, "Title");
            assert!(sents.iter().all(|s| !s.text.is_empty()));
            let joined: String = sents.iter().skip(1).map(|s| squash(&s.text)).collect();
            assert_eq!(joined, squash(&abs));
        }
    }
}
