//! Exact Euclidean ranking and the mAP@k / Prec@k metrics.
//!
//! AP@k divides by `min(R, k)`, where `R` is the number of relevant items
//! in the whole search set. Relevance is class equality; domains are ignored.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::data::{query_and_search_sets, ClassId, Dataset, DomainId, Protocol, SearchSetMode, SplitSpec};
use crate::model::SnMpModel;
use crate::{Error, Result};

/// Default cap on k.
pub const DEFAULT_K: usize = 200;

/// Search items ordered by ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: usize,
    pub ids: Vec<usize>,
    pub distances: Vec<f64>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn relevance(&self, is_relevant: impl Fn(usize) -> bool) -> Vec<bool> {
        self.ids.iter().map(|&id| is_relevant(id)).collect()
    }
}

/// Brute-force ranking of `search` (`(id, feature)` pairs) against `query`.
pub fn rank(query_id: usize, query: &[f64], search: &[(usize, &[f64])]) -> Result<RankedList> {
    if search.is_empty() {
        return Err(Error::Empty("search set".into()));
    }
    let mut scored = search
        .iter()
        .map(|&(id, f)| {
            if f.len() != query.len() {
                return Err(Error::Shape(format!(
                    "search item {id} has dimension {}, query has {}",
                    f.len(),
                    query.len()
                )));
            }
            Ok((kernels::euclidean(query, f), id))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedList {
        query_id,
        ids: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
    })
}

/// Fraction of relevant items among the top `min(k, len)`.
pub fn precision_at_k(relevance: &[bool], k: usize) -> f64 {
    let n = k.min(relevance.len());
    if n == 0 {
        return 0.0;
    }
    let hits = relevance[..n].iter().filter(|r| **r).count();
    hits as f64 / n as f64
}

/// `Σ_{i≤k} rel_i · Prec@i / min(R, k)`; zero when `total_relevant` is zero.
pub fn average_precision_at_k(relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    if total_relevant == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevance.iter().take(k).enumerate().filter(|(_, r)| **r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    sum / total_relevant.min(k) as f64
}

/// An embedded item for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub id: usize,
    pub class_id: ClassId,
    pub domain_id: DomainId,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: usize,
    pub class_id: ClassId,
    pub average_precision: f64,
    pub precision: f64,
    pub num_relevant: usize,
    /// Set when no search item shares the query's class.
    pub no_relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Option<Protocol>,
    pub search_set_mode: Option<SearchSetMode>,
    pub k: usize,
    pub map_at_k: f64,
    pub prec_at_k: f64,
    pub num_queries: usize,
    pub search_size: usize,
    pub flagged_queries: Vec<usize>,
    pub per_query: Vec<QueryResult>,
}

/// Ranks every query against the search set and aggregates metrics in query order.
/// `k` defaults to `min(200, |search|)`.
pub fn evaluate_embeddings(queries: &[Embedded], search: &[Embedded], k: Option<usize>) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set".into()));
    }
    if search.is_empty() {
        return Err(Error::Empty("search set".into()));
    }
    let k = k.unwrap_or_else(|| DEFAULT_K.min(search.len()));
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let class_of: std::collections::HashMap<usize, ClassId> = search.iter().map(|s| (s.id, s.class_id)).collect();
    if class_of.len() != search.len() {
        return Err(Error::InvalidArgument("duplicate id in search set".into()));
    }
    let items: Vec<(usize, &[f64])> = search.iter().map(|s| (s.id, s.feature.as_slice())).collect();

    let per_query = queries
        .par_iter()
        .map(|q| {
            let ranked = rank(q.id, &q.feature, &items)?;
            let rel = ranked.relevance(|id| class_of[&id] == q.class_id);
            let num_relevant = rel.iter().filter(|r| **r).count();
            Ok(QueryResult {
                query_id: q.id,
                class_id: q.class_id,
                average_precision: average_precision_at_k(&rel, num_relevant, k),
                precision: precision_at_k(&rel, k),
                num_relevant,
                no_relevant: num_relevant == 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_query.len() as f64;
    Ok(EvalReport {
        protocol: None,
        search_set_mode: None,
        k,
        map_at_k: per_query.iter().map(|q| q.average_precision).sum::<f64>() / n,
        prec_at_k: per_query.iter().map(|q| q.precision).sum::<f64>() / n,
        num_queries: per_query.len(),
        search_size: search.len(),
        flagged_queries: per_query.iter().filter(|q| q.no_relevant).map(|q| q.query_id).collect(),
        per_query,
    })
}

pub fn embed_samples(model: &SnMpModel, ds: &Dataset, indices: &[usize]) -> Result<Vec<Embedded>> {
    indices
        .par_iter()
        .map(|&i| {
            let s = ds.sample(i);
            Ok(Embedded {
                id: s.id,
                class_id: s.class_id,
                domain_id: s.domain_id,
                feature: model.embed(&s.input)?,
            })
        })
        .collect()
}

/// Test-time evaluation of `model` under `split`'s protocol and search-set mode.
pub fn evaluate(model: &SnMpModel, ds: &Dataset, split: &SplitSpec, k: Option<usize>) -> Result<EvalReport> {
    let sets = query_and_search_sets(ds, split)?;
    let queries = embed_samples(model, ds, &sets.queries)?;
    let search = embed_samples(model, ds, &sets.search)?;
    let k = k.map(|k| k.min(search.len()));
    let mut report = evaluate_embeddings(&queries, &search, k)?;
    report.protocol = Some(split.protocol);
    report.search_set_mode = Some(split.search_set_mode);
    Ok(report)
}

/// Compares two ranked distances; exposed for callers that merge lists.
pub fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}
