use std::io::{self, Write};

use super::SubdomainReport;

/// One reported number; `k` is empty for whole-ranking metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scope: String,
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(scope: &str, metric: &str, k: Option<usize>, value: f64) -> Self {
        Self {
            scope: scope.to_string(),
            metric: metric.to_string(),
            k,
            value,
        }
    }

    pub fn from_subdomain(r: &SubdomainReport) -> Vec<MetricRow> {
        let mut rows = vec![
            MetricRow::new(&r.name, "positives", None, r.positives as f64),
            MetricRow::new(&r.name, "candidates", None, r.candidates as f64),
            MetricRow::new(&r.name, "unscored", None, r.unscored as f64),
        ];
        if let Some(v) = r.roc_auc {
            rows.push(MetricRow::new(&r.name, "roc_auc", None, v));
        }
        if let Some(v) = r.pr_auc {
            rows.push(MetricRow::new(&r.name, "pr_auc_ap", None, v));
        }
        let rr = if r.rr_flagged { "rr_no_positive" } else { "rr" };
        rows.push(MetricRow::new(&r.name, rr, None, r.rr));
        for (k, p, ap, map, mrr) in &r.at_k {
            rows.push(MetricRow::new(&r.name, "p", Some(*k), *p));
            rows.push(MetricRow::new(&r.name, "ap", Some(*k), *ap));
            rows.push(MetricRow::new(&r.name, "map", Some(*k), *map));
            rows.push(MetricRow::new(&r.name, "mrr", Some(*k), *mrr));
        }
        rows
    }
}

fn k_field(k: Option<usize>) -> String {
    k.map_or_else(|| "-".to_string(), |k| k.to_string())
}

pub fn write_report_tsv(w: &mut dyn Write, rows: &[MetricRow]) -> io::Result<()> {
    writeln!(w, "scope\tmetric\tk\tvalue")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}\t{:.6}", r.scope, r.metric, k_field(r.k), r.value)?;
    }
    Ok(())
}

pub fn write_report_table(w: &mut dyn Write, rows: &[MetricRow]) -> io::Result<()> {
    let scope_w = rows.iter().map(|r| r.scope.len()).max().unwrap_or(0).max(5);
    let metric_w = rows.iter().map(|r| r.metric.len()).max().unwrap_or(0).max(6);
    writeln!(w, "{:<scope_w$}  {:<metric_w$}  {:>4}  {:>10}", "scope", "metric", "k", "value")?;
    writeln!(w, "{}", "-".repeat(scope_w + metric_w + 20))?;
    for r in rows {
        writeln!(
            w,
            "{:<scope_w$}  {:<metric_w$}  {:>4}  {:>10.4}",
            r.scope,
            r.metric,
            k_field(r.k),
            r.value
        )?;
    }
    Ok(())
}
