//! Ranking metrics and the temporal-holdout subdomain benchmark protocol.

mod report;
mod subdomain;

use thiserror::Error;

pub use report::{write_report_table, write_report_tsv, MetricRow};
pub use subdomain::{
    build_subdomain_benchmarks, evaluate_subdomain, one_to_many_queries, read_benchmarks,
    write_benchmarks, Candidate, Observation, SubdomainReport, SubdomainSpec,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: ranking needs at least one positive and one negative")]
    SingleClass,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no queries")]
    NoQueries,
    #[error("non-finite score for {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEntry {
    pub key: String,
    pub score: f64,
    pub label: bool,
}

/// Entries ordered by score descending, ties by key ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRanking {
    entries: Vec<LabeledEntry>,
}

impl LabeledRanking {
    pub fn new(mut entries: Vec<LabeledEntry>) -> Result<Self, MetricError> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(MetricError::NonFinite(e.key.clone()));
        }
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key)));
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LabeledEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label).count()
    }

    fn require_both(&self) -> Result<(usize, usize), MetricError> {
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(MetricError::SingleClass);
        }
        Ok((p, n))
    }
}

/// Mann-Whitney U statistic normalised to [0, 1], midranks for ties.
pub fn roc_auc(r: &LabeledRanking) -> Result<f64, MetricError> {
    let (p, n) = r.require_both()?;
    // Ascending by score; entries are stored descending.
    let asc: Vec<&LabeledEntry> = r.entries.iter().rev().collect();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < asc.len() {
        let mut j = i;
        while j + 1 < asc.len() && asc[j + 1].score == asc[i].score {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * asc[i..=j].iter().filter(|e| e.label).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve as average precision over all
/// positives (step interpolation).
pub fn pr_auc(r: &LabeledRanking) -> Result<f64, MetricError> {
    let (p, _) = r.require_both()?;
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, e) in r.entries.iter().enumerate() {
        if e.label {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

/// Reciprocal rank of the first positive; `None` when there is none (the
/// reported value is then 0).
pub fn reciprocal_rank(r: &LabeledRanking) -> Option<f64> {
    r.entries
        .iter()
        .position(|e| e.label)
        .map(|i| 1.0 / (i + 1) as f64)
}

pub fn precision_at(r: &LabeledRanking, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    Ok(r.entries.iter().take(k).filter(|e| e.label).count() as f64 / k as f64)
}

/// `(1 / min(k, P)) * sum_{i <= k} P@i * rel_i`; 0 when there are no positives.
pub fn avg_precision_at(r: &LabeledRanking, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let p = r.positives();
    if p == 0 {
        return Ok(0.0);
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, e) in r.entries.iter().take(k).enumerate() {
        if e.label {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(p) as f64)
}

/// Reciprocal rank truncated at `k`.
pub fn reciprocal_rank_at(r: &LabeledRanking, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    Ok(match r.entries.iter().take(k).position(|e| e.label) {
        Some(i) => 1.0 / (i + 1) as f64,
        None => 0.0,
    })
}

/// (MAP@k, MRR@k) as unweighted means over one-to-many queries.
pub fn map_mrr(queries: &[LabeledRanking], k: usize) -> Result<(f64, f64), MetricError> {
    if queries.is_empty() {
        return Err(MetricError::NoQueries);
    }
    let mut ap = 0.0;
    let mut rr = 0.0;
    for q in queries {
        ap += avg_precision_at(q, k)?;
        rr += reciprocal_rank_at(q, k)?;
    }
    let n = queries.len() as f64;
    Ok((ap / n, rr / n))
}
