//! Query-versus-gallery retrieval metrics: mAP and CMC.
//!
//! Gallery entries with the query's own image id are always excluded. With
//! junk filtering on, entries sharing both vehicle and camera with the query
//! are excluded too (only when both sides carry a camera id). Excluded
//! entries do not occupy rank positions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{FeatureStore, StoreEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: Metric,
    /// L2-normalize features before computing distances.
    pub normalize: bool,
    pub junk_filter: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            normalize: true,
            junk_filter: true,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            if na == 0.0 || nb == 0.0 {
                return 1.0;
            }
            1.0 - a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum::<f64>()
        }
    }
}

/// Row per query, column per gallery entry.
pub fn pairwise_distances(
    queries: &FeatureStore,
    gallery: &FeatureStore,
    metric: Metric,
) -> Result<Vec<Vec<f64>>> {
    if queries.dim != gallery.dim {
        return Err(Error::DimensionMismatch(vec![queries.dim, gallery.dim]));
    }
    Ok(queries
        .entries
        .par_iter()
        .map(|q| {
            gallery
                .entries
                .iter()
                .map(|g| distance(&q.values, &g.values, metric))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// Gallery indices by ascending distance, ties by ascending index.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
    pub junk: Vec<bool>,
}

impl RankedResult {
    /// Relevance flags with junk positions removed.
    pub fn scored_relevance(&self) -> impl Iterator<Item = bool> + '_ {
        self.relevant
            .iter()
            .zip(&self.junk)
            .filter(|(_, &j)| !j)
            .map(|(&r, _)| r)
    }

    pub fn num_relevant(&self) -> usize {
        self.scored_relevance().filter(|&r| r).count()
    }
}

pub fn rank_gallery(
    distances: &[f64],
    gallery: &[StoreEntry],
    query: &StoreEntry,
    junk_filter: bool,
) -> RankedResult {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut relevant = Vec::with_capacity(order.len());
    let mut junk = Vec::with_capacity(order.len());
    for &g in &order {
        let entry = &gallery[g];
        let same_vehicle = entry.vehicle_id == query.vehicle_id;
        let same_camera = matches!((entry.camera_id, query.camera_id), (Some(a), Some(b)) if a == b);
        junk.push(entry.image_id == query.image_id || (junk_filter && same_vehicle && same_camera));
        relevant.push(same_vehicle);
    }
    RankedResult {
        query_id: query.image_id.clone(),
        distances: order.iter().map(|&g| distances[g]).collect(),
        order,
        relevant,
        junk,
    }
}

/// Mean of precision@k over the positions `k` of relevant entries, or `None`
/// when the query has no relevant entry.
pub fn average_precision(result: &RankedResult) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, rel) in result.scored_relevance().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Zero-based scored position of the first relevant entry.
pub fn first_hit(result: &RankedResult) -> Option<usize> {
    result.scored_relevance().position(|r| r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    /// `cmc[k]` is the fraction of scored queries with a hit in the top `k + 1`.
    pub cmc: Vec<f64>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Queries that contributed to the metrics.
    pub num_queries: usize,
    /// Queries without any relevant gallery entry.
    pub num_skipped: usize,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        format!(
            "mAP {:.2}% R1 {:.2}% R5 {:.2}% R10 {:.2}% ({} queries, {} skipped)",
            self.map * 100.0,
            self.r1 * 100.0,
            self.r5 * 100.0,
            self.r10 * 100.0,
            self.num_queries,
            self.num_skipped
        )
    }
}

fn normalized(store: &FeatureStore) -> FeatureStore {
    let mut out = store.clone();
    for e in &mut out.entries {
        let norm = dot(&e.values, &e.values).sqrt();
        if norm > 0.0 {
            e.values.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Ranks every query against the gallery and aggregates mAP and CMC.
pub fn rank_all(queries: &FeatureStore, gallery: &FeatureStore, config: &EvalConfig) -> Result<Vec<RankedResult>> {
    let (q, g) = if config.normalize {
        (normalized(queries), normalized(gallery))
    } else {
        (queries.clone(), gallery.clone())
    };
    let dist = pairwise_distances(&q, &g, config.metric)?;
    Ok(q.entries
        .par_iter()
        .zip(dist.par_iter())
        .map(|(entry, row)| rank_gallery(row, &g.entries, entry, config.junk_filter))
        .collect())
}

pub fn evaluate(queries: &FeatureStore, gallery: &FeatureStore, config: &EvalConfig) -> Result<MetricsReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::InvalidArgument("query and gallery stores must be nonempty".into()));
    }
    let results = rank_all(queries, gallery, config)?;
    let n = gallery.len();
    let mut ap_sum = 0.0;
    let mut hits_at = vec![0usize; n];
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for r in &results {
        match (average_precision(r), first_hit(r)) {
            (Some(ap), Some(first)) => {
                ap_sum += ap;
                hits_at[first] += 1;
                scored += 1;
            }
            _ => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(Error::NoValidQueries { skipped });
    }
    let mut cmc = Vec::with_capacity(n);
    let mut running = 0usize;
    for h in hits_at {
        running += h;
        cmc.push(running as f64 / scored as f64);
    }
    let at = |k: usize| cmc[k.min(n) - 1];
    Ok(MetricsReport {
        map: ap_sum / scored as f64,
        r1: at(1),
        r5: at(5),
        r10: at(10),
        cmc,
        num_queries: scored,
        num_skipped: skipped,
        config: config.clone(),
    })
}
