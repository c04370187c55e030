//! Single-shot retrieval evaluation: features, distances, mAP and CMC with
//! same-identity/same-camera exclusion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Model, ModelError};
use crate::data::{Dataset, Split, JUNK_ID};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no query has a valid positive in the gallery")]
    NoValidQueries,
    #[error("shape mismatch: {0}")]
    Dimension(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub config_id: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    /// AP of every valid query, in query order.
    pub per_query_ap: Vec<QueryAp>,
    pub num_queries: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc
            .get(k.saturating_sub(1))
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    pub fn rank5(&self) -> f64 {
        self.rank(5)
    }

    pub const CSV_HEADER: [&'static str; 4] = ["config_id", "mAP", "rank1", "rank5"];

    pub fn csv_row(&self) -> [String; 4] {
        [
            self.config_id.clone(),
            format!("{:.6}", self.map),
            format!("{:.6}", self.rank1()),
            format!("{:.6}", self.rank5()),
        ]
    }
}

/// Divide each row by its Euclidean norm.
pub fn l2_normalize_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let n = row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
        let inv = T::of(1.0 / n.max(1e-12));
        for v in row {
            *v = *v * inv;
        }
    }
    out
}

/// Eval-mode embeddings of dataset entries, L2-normalized, `[N×D]`.
pub fn extract_features<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Tensor<T>> {
    let d = model.feature_dim();
    let mut rows = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(batch_size.max(1)) {
        let f = model.forward_features(&data.batch::<T>(chunk))?;
        rows.extend_from_slice(l2_normalize_rows(&f).data());
    }
    Tensor::new(&[indices.len(), d], rows).map_err(|e| EvalError::Dimension(e.to_string()))
}

/// `[Q×G]` distances between query and gallery rows.
pub fn distance_matrix<T: Element>(q: &Tensor<T>, g: &Tensor<T>, metric: Metric) -> Result<Tensor<f64>> {
    if q.rank() != 2 || g.rank() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(EvalError::Dimension(format!(
            "query {:?} vs gallery {:?}",
            q.shape(),
            g.shape()
        )));
    }
    let (nq, ng, d) = (q.shape()[0], g.shape()[0], q.shape()[1]);
    let mut out = Vec::with_capacity(nq * ng);
    for qi in q.data().chunks(d.max(1)).take(nq) {
        for gi in g.data().chunks(d.max(1)).take(ng) {
            let v = match metric {
                Metric::Cosine => {
                    1.0 - qi.iter().zip(gi).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>()
                }
                Metric::Euclidean => qi
                    .iter()
                    .zip(gi)
                    .map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            out.push(v);
        }
    }
    Tensor::new(&[nq, ng], out).map_err(|e| EvalError::Dimension(e.to_string()))
}

/// Role of one gallery entry for one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    Positive,
    Negative,
    /// Same identity seen by the same camera, or a junk image.
    Excluded,
}

pub fn relevance(q_id: i64, q_cam: usize, g_id: i64, g_cam: usize) -> Relevance {
    if g_id == JUNK_ID || (g_id == q_id && g_cam == q_cam) {
        Relevance::Excluded
    } else if g_id == q_id {
        Relevance::Positive
    } else {
        Relevance::Negative
    }
}

fn by_distance_then_index(row: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b))
}

/// AP and first-hit rank (0-based among non-excluded entries) of one query;
/// `None` when the query has no positive.
fn rank_query(row: &[f64], flags: &[Relevance]) -> Option<(f64, usize)> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(by_distance_then_index(row));
    let (mut rank, mut hits, mut sum, mut first) = (0usize, 0usize, 0.0, None);
    for g in order {
        match flags[g] {
            Relevance::Excluded => continue,
            Relevance::Positive => {
                hits += 1;
                sum += hits as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
            Relevance::Negative => {}
        }
        rank += 1;
    }
    first.map(|f| (sum / hits as f64, f))
}

/// Score a distance matrix. Queries without any valid positive are skipped.
pub fn evaluate(
    dist: &Tensor<f64>,
    q_ids: &[i64],
    q_cams: &[usize],
    g_ids: &[i64],
    g_cams: &[usize],
) -> Result<RetrievalResult> {
    let [nq, ng] = match dist.shape() {
        &[a, b] => [a, b],
        s => return Err(EvalError::Dimension(format!("distance matrix shape {s:?}"))),
    };
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(EvalError::Dimension(format!(
            "{nq}×{ng} distances with {}/{} query and {}/{} gallery labels",
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    let mut cmc = vec![0.0; ng];
    let mut per_query_ap = Vec::new();
    for q in 0..nq {
        let row = &dist.data()[q * ng..(q + 1) * ng];
        let flags: Vec<Relevance> = (0..ng)
            .map(|g| relevance(q_ids[q], q_cams[q], g_ids[g], g_cams[g]))
            .collect();
        if let Some((ap, first)) = rank_query(row, &flags) {
            per_query_ap.push(QueryAp { query: q, ap });
            for c in &mut cmc[first..] {
                *c += 1.0;
            }
        }
    }
    if per_query_ap.is_empty() {
        return Err(EvalError::NoValidQueries);
    }
    let n = per_query_ap.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= n);
    Ok(RetrievalResult {
        config_id: String::new(),
        map: per_query_ap.iter().map(|q| q.ap).sum::<f64>() / n,
        cmc,
        per_query_ap,
        num_queries: nq,
    })
}

/// Average precision by its literal definition, without sorting: the rank
/// of a positive is one plus the number of valid entries ahead of it.
pub fn brute_force_ap_oracle(row: &[f64], flags: &[Relevance]) -> Option<f64> {
    let ahead = |a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
    let positives: Vec<usize> = (0..row.len()).filter(|&i| flags[i] == Relevance::Positive).collect();
    if positives.is_empty() {
        return None;
    }
    // precision at each positive's rank, keyed by that rank so the sum runs
    // in the same order as a ranked sweep
    let mut terms: Vec<(usize, f64)> = positives
        .iter()
        .map(|&p| {
            let rank = 1 + (0..row.len())
                .filter(|&j| flags[j] != Relevance::Excluded && ahead(j, p))
                .count();
            let hits = 1 + positives.iter().filter(|&&j| ahead(j, p)).count();
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    terms.sort_by_key(|t| t.0);
    Some(terms.iter().map(|t| t.1).sum::<f64>() / positives.len() as f64)
}

/// Extract query/gallery features of a dataset's test split and evaluate.
pub fn evaluate_model<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    metric: Metric,
    batch_size: usize,
) -> Result<RetrievalResult> {
    let qi = data.indices(Split::Query);
    let gi = data.indices(Split::Gallery);
    let labels = |idx: &[usize]| -> (Vec<i64>, Vec<usize>) {
        idx.iter().map(|&i| (data.entries[i].id, data.entries[i].cam)).unzip()
    };
    let (q_ids, q_cams) = labels(&qi);
    let (g_ids, g_cams) = labels(&gi);
    if !q_ids.iter().any(|id| *id != JUNK_ID && g_ids.contains(id)) {
        return Err(EvalError::Protocol("query and gallery identities do not overlap".into()));
    }
    let qf = extract_features(model, data, &qi, batch_size)?;
    let gf = extract_features(model, data, &gi, batch_size)?;
    let dist = distance_matrix(&qf, &gf, metric)?;
    let mut r = evaluate(&dist, &q_ids, &q_cams, &g_ids, &g_cams)?;
    r.config_id = model.plan.to_string();
    Ok(r)
}
