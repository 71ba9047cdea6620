//! Descriptor database and the retrieval evaluation protocol.
//!
//! Search is exact: every query is ranked against every database row by
//! Euclidean distance (lower id wins ties). A retrieval succeeds when the
//! returned place lies within the success radius (25 m by default, inclusive)
//! of the query's true coordinate. Reported metrics are the recall of the
//! top-r lists for r = 1..25 and the recall at the top 1% of the database
//! size, with k = max(1, round-half-even(0.01 n)).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{forward_pipeline, Model, PipelineConfig};
use crate::linalg;
use crate::scene::{GeoCoordinate, Scene};
use crate::vlad::GlobalDescriptor;

/// Immutable bank of unit-norm descriptors with their geo coordinates.
#[derive(Debug, Clone)]
pub struct DescriptorDatabase {
    descriptors: Vec<Vec<f64>>,
    coords: Vec<GeoCoordinate>,
    ids: Vec<u64>,
}

impl DescriptorDatabase {
    pub fn new(
        descriptors: Vec<Vec<f64>>,
        coords: Vec<GeoCoordinate>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::InvalidArgument("descriptor database is empty".into()));
        }
        if descriptors.len() != coords.len() || descriptors.len() != ids.len() {
            return Err(Error::DimMismatch(format!(
                "{} descriptors, {} coords, {} ids",
                descriptors.len(),
                coords.len(),
                ids.len()
            )));
        }
        let dim = descriptors[0].len();
        for (i, d) in descriptors.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "descriptor {i} has dim {}, expected {dim}",
                    d.len()
                )));
            }
            let norm = linalg::l2_norm(d);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "descriptor {i} has norm {norm}, expected 1 within 1e-9"
                )));
            }
        }
        Ok(DescriptorDatabase {
            descriptors,
            coords,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].len()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i]
    }

    pub fn coord(&self, i: usize) -> GeoCoordinate {
        self.coords[i]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn coord_of_id(&self, id: u64) -> Option<GeoCoordinate> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|i| self.coords[i])
    }

    /// Database without row `i` (for ablation-style checks).
    pub fn without_row(&self, i: usize) -> Result<DescriptorDatabase> {
        let mut descriptors = self.descriptors.clone();
        let mut coords = self.coords.clone();
        let mut ids = self.ids.clone();
        descriptors.remove(i);
        coords.remove(i);
        ids.remove(i);
        DescriptorDatabase::new(descriptors, coords, ids)
    }
}

/// Forward every scene through the pipeline; row order follows scene order.
pub fn build_database(
    scenes: &[Scene],
    model: &Model,
    config: &PipelineConfig,
) -> Result<DescriptorDatabase> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to index".into()));
    }
    let mut descriptors = Vec::with_capacity(scenes.len());
    let mut coords = Vec::with_capacity(scenes.len());
    let mut ids = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let desc = forward_pipeline(scene, model, config).map_err(|e| {
            Error::InvalidArgument(format!("scene {}: {e}", scene.id))
        })?;
        descriptors.push(desc.values().to_vec());
        coords.push(scene.coord);
        ids.push(scene.id);
    }
    DescriptorDatabase::new(descriptors, coords, ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    distance: f64,
    id: u64,
    row: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-k by Euclidean distance, ascending, ties toward the lower id.
///
/// Selection runs through a bounded max-heap; the full-sort route lives in
/// the test oracles.
pub fn query_topk(
    query: &[f64],
    db: &DescriptorDatabase,
    k: usize,
) -> Result<Vec<(u64, f64)>> {
    if k == 0 || k > db.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range 1..={}",
            db.len()
        )));
    }
    if query.len() != db.dim() {
        return Err(Error::DimMismatch(format!(
            "query dim {} vs database dim {}",
            query.len(),
            db.dim()
        )));
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for row in 0..db.len() {
        let distance = linalg::squared_distance(query, db.descriptor(row)).sqrt();
        heap.push(HeapEntry {
            distance,
            id: db.id(row),
            row,
        });
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut out: Vec<HeapEntry> = heap.into_vec();
    out.sort_by(|a, b| a.cmp(b));
    Ok(out.into_iter().map(|e| (e.id, e.distance)).collect())
}

/// Inclusive 25 m rule: a retrieval at exactly the radius counts.
pub fn is_success(query: &GeoCoordinate, result: &GeoCoordinate, radius_m: f64) -> bool {
    query.distance(result) <= radius_m
}

/// Database fraction defining "top 1%": max(1, round-half-even(0.01 n)).
pub fn k_one_percent(n: usize) -> usize {
    ((0.01 * n as f64).round_ties_even() as usize).max(1)
}

/// Number of top ranks reported in the recall curve.
pub const RECALL_CURVE_RANKS: usize = 25;

/// Evaluation result over one query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// recall_at_rank[r - 1] = fraction of queries with a success in the
    /// top r results.
    pub recall_at_rank: Vec<f64>,
    pub recall_at_1pct: f64,
    pub n_queries: usize,
    pub k_1pct: usize,
}

impl RecallReport {
    pub fn recall_at(&self, rank: usize) -> f64 {
        self.recall_at_rank[rank.min(self.recall_at_rank.len()) - 1]
    }

    /// (rank, recall) rows for curve plotting.
    pub fn rank_csv(&self) -> String {
        let mut out = String::from("rank,recall\n");
        for (i, r) in self.recall_at_rank.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, r));
        }
        out
    }

    pub fn parse_rank_csv(text: &str) -> Result<Vec<(usize, f64)>> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let (rank, recall) = line.split_once(',').ok_or_else(|| {
                Error::InvalidArgument(format!("bad recall csv row: {line}"))
            })?;
            rows.push((
                rank.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad rank: {rank}")))?,
                recall
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad recall: {recall}")))?,
            ));
        }
        Ok(rows)
    }

    fn validate(&self) -> Result<()> {
        if self
            .recall_at_rank
            .iter()
            .any(|r| !(0.0..=1.0).contains(r))
            || !(0.0..=1.0).contains(&self.recall_at_1pct)
        {
            return Err(Error::InvalidArgument("recall outside [0, 1]".into()));
        }
        if self.recall_at_rank.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("recall curve must be monotone".into()));
        }
        Ok(())
    }
}

/// Run the full protocol: rank every query, apply the success radius, report
/// the top-25 recall curve and recall at the top 1%.
pub fn evaluate(
    queries: &[(GlobalDescriptor, GeoCoordinate)],
    db: &DescriptorDatabase,
    radius_m: f64,
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let n = db.len();
    let k_1pct = k_one_percent(n);
    let fetch = RECALL_CURVE_RANKS.max(k_1pct).min(n);

    let mut best_ranks: Vec<Option<usize>> = Vec::with_capacity(queries.len());
    for (desc, coord) in queries {
        let top = query_topk(desc.values(), db, fetch)?;
        let best = top.iter().position(|(id, _)| {
            let rc = db.coord_of_id(*id).expect("id from this database");
            is_success(coord, &rc, radius_m)
        });
        best_ranks.push(best.map(|p| p + 1));
    }

    let nq = queries.len() as f64;
    let recall_up_to = |rank: usize| -> f64 {
        let hits = best_ranks
            .iter()
            .filter(|b| b.is_some_and(|r| r <= rank))
            .count();
        hits as f64 / nq
    };
    let recall_at_rank: Vec<f64> = (1..=RECALL_CURVE_RANKS)
        .map(|r| recall_up_to(r.min(fetch)))
        .collect();
    let report = RecallReport {
        recall_at_rank,
        recall_at_1pct: recall_up_to(k_1pct),
        n_queries: queries.len(),
        k_1pct,
    };
    report.validate()?;
    Ok(report)
}
