//! Recall@k, average precision, and the recall / precision-recall curves.
//!
//! Gallery items listed as excluded for a query are dropped from its ranking
//! before any metric is computed.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{RankEntry, RankingResult};
use crate::curation::{Benchmark, BenchmarkQuery};
use crate::error::{Error, Result};

/// Intervals of the fixed recall grid `{0, 0.05, …, 1}`.
pub const PR_GRID_STEPS: usize = 20;

fn lookup(rankings: &[RankingResult]) -> HashMap<&str, &RankingResult> {
    rankings.iter().map(|r| (r.query_id.as_str(), r)).collect()
}

fn judged<'a>(q: &BenchmarkQuery, index: &HashMap<&str, &'a RankingResult>) -> Result<Vec<&'a RankEntry>> {
    let r = index
        .get(q.id.as_str())
        .ok_or_else(|| Error::data(format!("no ranking for query `{}`", q.id)))?;
    let excluded: BTreeSet<&str> = q.excluded.iter().map(String::as_str).collect();
    Ok(r.entries.iter().filter(|e| !excluded.contains(e.id.as_str())).collect())
}

fn positives(q: &BenchmarkQuery) -> Result<BTreeSet<&str>> {
    if q.positives.is_empty() {
        return Err(Error::data(format!("query `{}` has no positives", q.id)));
    }
    Ok(q.positives.iter().map(String::as_str).collect())
}

fn query_recall(ranked: &[&RankEntry], pos: &BTreeSet<&str>, k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|e| pos.contains(e.id.as_str())).count();
    hits as f64 / pos.len() as f64
}

/// Mean over positives of the precision at each positive's rank; positives
/// missing from the ranking contribute zero.
pub fn average_precision(ranked: &[&str], positives: &BTreeSet<&str>) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, id) in ranked.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / positives.len() as f64
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over queries of `|positives ∩ top-k| / |positives|`.
pub fn recall_at_k(rankings: &[RankingResult], bench: &Benchmark, k: usize) -> Result<f64> {
    let index = lookup(rankings);
    let per = bench
        .queries
        .iter()
        .map(|q| Ok(query_recall(&judged(q, &index)?, &positives(q)?, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(per.into_iter()))
}

pub fn mean_average_precision(rankings: &[RankingResult], bench: &Benchmark) -> Result<f64> {
    let index = lookup(rankings);
    let per = bench
        .queries
        .iter()
        .map(|q| {
            let ranked: Vec<&str> = judged(q, &index)?.iter().map(|e| e.id.as_str()).collect();
            Ok(average_precision(&ranked, &positives(q)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(per.into_iter()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    /// Aligned with [`MetricReport::ks`].
    pub recall: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    pub recall: Vec<f64>,
    pub map: f64,
    pub query_count: usize,
}

impl MetricReport {
    /// `(query_id, metric, value)` rows, per query then aggregates (`all`).
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for q in &self.per_query {
            for (k, r) in self.ks.iter().zip(&q.recall) {
                out.push((q.query_id.clone(), format!("recall@{k}"), *r));
            }
            out.push((q.query_id.clone(), "ap".to_string(), q.ap));
        }
        for (k, r) in self.ks.iter().zip(&self.recall) {
            out.push(("all".to_string(), format!("recall@{k}"), *r));
        }
        out.push(("all".to_string(), "mAP".to_string(), self.map));
        out
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Per-query and aggregate Recall@`ks` and mAP, in benchmark query order.
pub fn evaluate(rankings: &[RankingResult], bench: &Benchmark, ks: &[usize]) -> Result<MetricReport> {
    let index = lookup(rankings);
    let per_query = bench
        .queries
        .iter()
        .map(|q| {
            let ranked = judged(q, &index)?;
            let pos = positives(q)?;
            let ids: Vec<&str> = ranked.iter().map(|e| e.id.as_str()).collect();
            Ok(QueryMetrics {
                query_id: q.id.clone(),
                recall: ks.iter().map(|&k| query_recall(&ranked, &pos, k)).collect(),
                ap: average_precision(&ids, &pos),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let recall = (0..ks.len())
        .map(|i| mean(per_query.iter().map(|q| q.recall[i])))
        .collect();
    let map = mean(per_query.iter().map(|q| q.ap));
    Ok(MetricReport {
        ks: ks.to_vec(),
        query_count: per_query.len(),
        per_query,
        recall,
        map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    RecallTopk,
    PrecisionRecall,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::RecallTopk => "recall_topk",
            CurveKind::PrecisionRecall => "precision_recall",
        }
    }
}

impl std::str::FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall_topk" | "recall-topk" => Ok(CurveKind::RecallTopk),
            "precision_recall" | "precision-recall" | "pr" => Ok(CurveKind::PrecisionRecall),
            _ => Err(Error::config(format!("unknown curve kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub kind: CurveKind,
    pub points: Vec<(f64, f64)>,
}

/// Interpolated precision (best precision at recall ≥ r) on the recall grid
/// for one query, sweeping thresholds at each distinct score.
fn pr_grid(ranked: &[&RankEntry], pos: &BTreeSet<&str>) -> Vec<f64> {
    let mut sweep = Vec::new();
    let mut hits = 0usize;
    for (i, e) in ranked.iter().enumerate() {
        if pos.contains(e.id.as_str()) {
            hits += 1;
        }
        let last_at_threshold = ranked.get(i + 1).is_none_or(|n| n.score != e.score);
        if last_at_threshold {
            sweep.push((hits as f64 / pos.len() as f64, hits as f64 / (i + 1) as f64));
        }
    }
    (0..=PR_GRID_STEPS)
        .map(|g| {
            let r = g as f64 / PR_GRID_STEPS as f64;
            sweep
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Recall@k over the `ks` sweep, or the query-averaged interpolated
/// precision-recall curve.
pub fn curve(rankings: &[RankingResult], bench: &Benchmark, kind: CurveKind, ks: &[usize]) -> Result<CurveData> {
    let points = match kind {
        CurveKind::RecallTopk => {
            if ks.is_empty() {
                return Err(Error::config("recall curve needs at least one k"));
            }
            let report = evaluate(rankings, bench, ks)?;
            ks.iter().zip(report.recall).map(|(&k, r)| (k as f64, r)).collect()
        }
        CurveKind::PrecisionRecall => {
            let index = lookup(rankings);
            let mut sum = vec![0.0; PR_GRID_STEPS + 1];
            for q in &bench.queries {
                let grid = pr_grid(&judged(q, &index)?, &positives(q)?);
                sum.iter_mut().zip(grid).for_each(|(s, g)| *s += g);
            }
            let n = bench.queries.len().max(1) as f64;
            sum.into_iter()
                .enumerate()
                .map(|(g, s)| (g as f64 / PR_GRID_STEPS as f64, s / n))
                .collect()
        }
    };
    Ok(CurveData { kind, points })
}
