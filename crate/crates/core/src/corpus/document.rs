use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::split::Sentence;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("duplicate document id {id:?} on line {line} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A subject-verb-object assertion attached to a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateRecord {
    pub subject_id: String,
    pub subject_type: String,
    pub verb: String,
    pub object_id: String,
    pub object_type: String,
    /// Filled from the owning document when absent.
    #[serde(default)]
    pub date: Option<NaiveDate>,
    /// Index of the source sentence (0 = title). When absent the predicate is
    /// attached to every sentence of its document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<usize>,
}

impl PredicateRecord {
    /// `subject:verb:object`, the predicate node name.
    pub fn triple_name(&self) -> String {
        format!("{}:{}:{}", self.subject_id, self.verb, self.object_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    pub date: NaiveDate,
    pub language: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub predicates: Vec<PredicateRecord>,
}

impl Document {
    fn validate(&self, vocabulary: Option<&BTreeSet<String>>) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty document id".into());
        }
        if self.title.trim().is_empty() {
            return Err(format!("document {:?} has an empty title", self.id));
        }
        for p in &self.predicates {
            if p.subject_id.is_empty() || p.object_id.is_empty() || p.verb.is_empty() {
                return Err(format!("document {:?}: predicate with empty field", self.id));
            }
            if p.subject_id == p.object_id {
                return Err(format!(
                    "document {:?}: predicate subject equals object ({})",
                    self.id, p.subject_id
                ));
            }
            if let Some(vocab) = vocabulary {
                for t in [&p.subject_type, &p.object_type] {
                    if !vocab.contains(t) {
                        return Err(format!(
                            "document {:?}: semantic type {t:?} not in vocabulary",
                            self.id
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Documents retained by ingestion, in input order.
pub type Corpus = Vec<Document>;

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub cutoff: NaiveDate,
    /// Language code a document must carry to be retained.
    pub language: String,
    /// Allowed semantic-type codes; `None` accepts any code.
    pub type_vocabulary: Option<BTreeSet<String>>,
}

impl IngestOptions {
    pub fn new(cutoff: NaiveDate) -> Self {
        Self {
            cutoff,
            language: "en".to_string(),
            type_vocabulary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct IngestOutput {
    /// Documents in the training language dated strictly before the cutoff.
    pub corpus: Corpus,
    /// Documents in the training language dated on or after the cutoff. Never
    /// used for training; their predicates form the validation set.
    pub held_out: Vec<Document>,
    pub errors: Vec<RecordError>,
}

/// Reads JSON-lines documents and applies the language and temporal filters.
///
/// Malformed records are reported per line and skipped; a repeated document id
/// aborts ingestion.
pub fn ingest<R: BufRead>(reader: R, options: &IngestOptions) -> Result<IngestOutput, CorpusError> {
    let mut out = IngestOutput::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = match serde_json::from_str(&line) {
            Ok(d) => d,
            Err(e) => {
                out.errors.push(RecordError {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Err(message) = doc.validate(options.type_vocabulary.as_ref()) {
            out.errors.push(RecordError {
                line: line_no,
                message,
            });
            continue;
        }
        if let Some(&first_line) = seen.get(&doc.id) {
            return Err(CorpusError::DuplicateId {
                id: doc.id,
                line: line_no,
                first_line,
            });
        }
        seen.insert(doc.id.clone(), line_no);
        if doc.language != options.language {
            continue;
        }
        for p in &mut doc.predicates {
            p.date = Some(doc.date);
        }
        if doc.date < options.cutoff {
            out.corpus.push(doc);
        } else {
            out.held_out.push(doc);
        }
    }
    for e in &out.errors {
        log::warn!("skipping record on line {}: {}", e.line, e.message);
    }
    Ok(out)
}

pub fn write_sentences(w: &mut dyn Write, sentences: &[Sentence]) -> io::Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sentences<R: BufRead>(reader: R) -> Result<Vec<Sentence>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn record(id: &str, lang: &str, date: &str) -> String {
        format!(r#"{{"id":"{id}","title":"T {id}","abstract":"","date":"{date}","language":"{lang}"}}"#)
    }

    fn cutoff() -> IngestOptions {
        IngestOptions::new(NaiveDate::from_ymd_opt(2015, 1, 1).unwrap())
    }

    #[test]
    fn holdout_filter_keeps_english_before_cutoff() {
        let input = [
            record("a", "en", "2010-03-01"),
            record("b", "fr", "2010-03-01"),
            record("c", "en", "2016-03-01"),
        ]
        .join("\n");
        let out = ingest(input.as_bytes(), &cutoff()).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.corpus[0].id, "a");
        assert_eq!(out.held_out.len(), 1);
        assert!(out.errors.is_empty());
    }

    #[test]
    fn empty_stream() {
        let out = ingest(&b""[..], &cutoff()).unwrap();
        assert!(out.corpus.is_empty());
    }

    #[test]
    fn cutoff_date_itself_is_excluded() {
        let out = ingest(record("a", "en", "2015-01-01").as_bytes(), &cutoff()).unwrap();
        assert!(out.corpus.is_empty());
    }

    #[test]
    fn malformed_record_reports_line_and_continues() {
        let input = [
            record("a", "en", "2010-01-01"),
            "{not json".to_string(),
            record("c", "en", "2011-13-01"),
            record("d", "en", "2012-01-01"),
        ]
        .join("\n");
        let out = ingest(input.as_bytes(), &cutoff()).unwrap();
        assert_eq!(out.corpus.len(), 2);
        let lines: Vec<usize> = out.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![2, 3]);
    }

    #[test]
    fn duplicate_id_is_fatal() {
        let input = [record("a", "en", "2010-01-01"), record("a", "fr", "2010-01-01")].join("\n");
        match ingest(input.as_bytes(), &cutoff()) {
            Err(CorpusError::DuplicateId { line, first_line, .. }) => {
                assert_eq!((line, first_line), (2, 1));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn predicate_validation_and_date_inheritance() {
        let ok = r#"{"id":"a","title":"T","date":"2010-01-01","language":"en","predicates":[{"subject_id":"C1","subject_type":"gngm","verb":"treats","object_id":"C2","object_type":"dsyn"}]}"#;
        let bad = r#"{"id":"b","title":"T","date":"2010-01-01","language":"en","predicates":[{"subject_id":"C1","subject_type":"gngm","verb":"treats","object_id":"C1","object_type":"dsyn"}]}"#;
        let mut opts = cutoff();
        opts.type_vocabulary = Some(["gngm".to_string(), "dsyn".to_string()].into());
        let out = ingest(format!("{ok}\n{bad}").as_bytes(), &opts).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(
            out.corpus[0].predicates[0].date,
            NaiveDate::from_ymd_opt(2010, 1, 1)
        );
        opts.type_vocabulary = Some(["gngm".to_string()].into());
        let out = ingest(ok.as_bytes(), &opts).unwrap();
        assert!(out.corpus.is_empty());
        assert_eq!(out.errors.len(), 1);
    }

    #[test]
    fn retained_count_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut lines = Vec::new();
        let mut records = Vec::new();
        for i in 0..1000 {
            let lang = if rng.gen_bool(0.8) { "en" } else { "de" };
            let year = rng.gen_range(1995..2020);
            let month = rng.gen_range(1..=12);
            let date = format!("{year}-{month:02}-15");
            lines.push(record(&format!("d{i}"), lang, &date));
            records.push((lang, NaiveDate::parse_from_str(&date, "%Y-%m-%d").unwrap()));
        }
        let opts = cutoff();
        let expected = records
            .iter()
            .filter(|(l, d)| *l == "en" && *d < opts.cutoff)
            .count();
        let out = ingest(lines.join("\n").as_bytes(), &opts).unwrap();
        assert_eq!(out.corpus.len(), expected);
        assert!(out.corpus.iter().all(|d| d.date < opts.cutoff));

        // Idempotent and order-preserving on already-filtered input.
        let refed: Vec<String> = out
            .corpus
            .iter()
            .map(|d| serde_json::to_string(d).unwrap())
            .collect();
        let again = ingest(refed.join("\n").as_bytes(), &opts).unwrap();
        assert_eq!(again.corpus, out.corpus);
    }
}
