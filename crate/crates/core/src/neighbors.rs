//! Per-observation index over variate-time points.
//!
//! Points are numbered globally in canonical order: variate-major, then
//! `(timestamp, sample)` within a variate. Inter-variate results never
//! contain points of the query's own variate and are returned sorted by
//! `(timestamp, variate, sample)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::data::{Observation, VariateTimePoint};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborQuery {
    /// The `k` other-variate points closest in time.
    Knn(usize),
    /// Every other-variate point within this time distance (inclusive).
    Radius(f64),
}

impl NeighborQuery {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NeighborQuery::Knn(0) => Err(Error::Config("knn requires K >= 1".into())),
            NeighborQuery::Radius(r) if r.is_nan() || r < 0.0 => {
                Err(Error::Config("radius must be nonnegative".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    timestamp: f64,
    sample: usize,
}

#[derive(Clone, Debug)]
pub struct NeighborIndex {
    variates: Vec<Vec<Entry>>,
    /// Global id of each variate's first point.
    offsets: Vec<usize>,
    /// `ranks[v][sample]` is the position of `sample` within variate `v`.
    ranks: Vec<Vec<usize>>,
    total: usize,
}

/// Candidate in the k-nearest merge; ordered by
/// `(distance, variate, timestamp, sample)`.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    distance: f64,
    timestamp: f64,
    variate: usize,
    sample: usize,
    rank: usize,
    from_left: bool,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // reversed so that BinaryHeap pops the smallest key
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .distance
            .total_cmp(&self.distance)
            .then(other.variate.cmp(&self.variate))
            .then(other.timestamp.total_cmp(&self.timestamp))
            .then(other.sample.cmp(&self.sample))
    }
}

fn canonical_cmp(a: &VariateTimePoint, b: &VariateTimePoint) -> Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then(a.variate.cmp(&b.variate))
        .then(a.sample.cmp(&b.sample))
}

impl NeighborIndex {
    pub fn build(obs: &Observation) -> Self {
        let mut offsets = Vec::with_capacity(obs.variates.len());
        let mut total = 0;
        let mut variates = Vec::with_capacity(obs.variates.len());
        let mut ranks = Vec::with_capacity(obs.variates.len());
        for series in &obs.variates {
            let mut entries: Vec<Entry> = series
                .samples
                .iter()
                .enumerate()
                .map(|(sample, s)| Entry {
                    timestamp: s.timestamp,
                    sample,
                })
                .collect();
            entries.sort_by(|a, b| {
                a.timestamp
                    .total_cmp(&b.timestamp)
                    .then(a.sample.cmp(&b.sample))
            });
            let mut rank = vec![0; entries.len()];
            for (r, e) in entries.iter().enumerate() {
                rank[e.sample] = r;
            }
            offsets.push(total);
            total += entries.len();
            variates.push(entries);
            ranks.push(rank);
        }
        Self {
            variates,
            offsets,
            ranks,
            total,
        }
    }

    pub fn n_variates(&self) -> usize {
        self.variates.len()
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn variate_len(&self, variate: usize) -> usize {
        self.variates[variate].len()
    }

    /// Global id range occupied by `variate`.
    pub fn variate_range(&self, variate: usize) -> std::ops::Range<usize> {
        let start = self.offsets[variate];
        start..start + self.variates[variate].len()
    }

    /// Point with global id `id`.
    pub fn point(&self, id: usize) -> VariateTimePoint {
        assert!(id < self.total, "point id {id} out of range");
        // empty variates share their successor's offset, so the last
        // offset not exceeding `id` belongs to the variate holding it
        let variate = self.offsets.partition_point(|&o| o <= id) - 1;
        let e = self.variates[variate][id - self.offsets[variate]];
        VariateTimePoint {
            variate,
            sample: e.sample,
            timestamp: e.timestamp,
        }
    }

    /// All points in global-id order.
    pub fn points(&self) -> impl Iterator<Item = VariateTimePoint> + '_ {
        self.variates
            .iter()
            .enumerate()
            .flat_map(|(variate, entries)| {
                entries.iter().map(move |e| VariateTimePoint {
                    variate,
                    sample: e.sample,
                    timestamp: e.timestamp,
                })
            })
    }

    /// Global id of a point, checking it belongs to this index.
    pub fn id_of(&self, p: &VariateTimePoint) -> Result<usize> {
        let unknown = || Error::UnknownPoint {
            variate: p.variate,
            sample: p.sample,
        };
        let rank = *self
            .ranks
            .get(p.variate)
            .and_then(|r| r.get(p.sample))
            .ok_or_else(unknown)?;
        if self.variates[p.variate][rank].timestamp.to_bits() != p.timestamp.to_bits() {
            return Err(unknown());
        }
        Ok(self.offsets[p.variate] + rank)
    }

    fn to_point(&self, variate: usize, rank: usize) -> VariateTimePoint {
        let e = self.variates[variate][rank];
        VariateTimePoint {
            variate,
            sample: e.sample,
            timestamp: e.timestamp,
        }
    }

    pub fn intra_neighbors(&self, p: &VariateTimePoint) -> Result<Vec<VariateTimePoint>> {
        self.id_of(p)?;
        Ok((0..self.variates[p.variate].len())
            .map(|r| self.to_point(p.variate, r))
            .collect())
    }

    pub fn inter_knn(&self, p: &VariateTimePoint, k: usize) -> Result<Vec<VariateTimePoint>> {
        self.id_of(p)?;
        Ok(self.knn_points(p.variate, p.timestamp, k))
    }

    pub fn inter_radius(&self, p: &VariateTimePoint, radius: f64) -> Result<Vec<VariateTimePoint>> {
        self.id_of(p)?;
        Ok(self.radius_points(p.variate, p.timestamp, radius))
    }

    pub fn inter(
        &self,
        p: &VariateTimePoint,
        query: NeighborQuery,
    ) -> Result<Vec<VariateTimePoint>> {
        match query {
            NeighborQuery::Knn(k) => self.inter_knn(p, k),
            NeighborQuery::Radius(r) => self.inter_radius(p, r),
        }
    }

    /// Intra-variate neighbor ids of every point, indexed by global id.
    pub fn intra_id_lists(&self) -> Vec<Vec<usize>> {
        (0..self.variates.len())
            .flat_map(|v| {
                let range = self.variate_range(v);
                std::iter::repeat_n(range.clone().collect::<Vec<_>>(), range.len())
            })
            .collect()
    }

    /// Inter-variate neighbor ids of every point, indexed by global id.
    pub fn inter_id_lists(&self, query: NeighborQuery) -> Vec<Vec<usize>> {
        self.points()
            .map(|p| {
                let found = match query {
                    NeighborQuery::Knn(k) => self.knn_points(p.variate, p.timestamp, k),
                    NeighborQuery::Radius(r) => self.radius_points(p.variate, p.timestamp, r),
                };
                found
                    .iter()
                    .map(|q| self.offsets[q.variate] + self.ranks[q.variate][q.sample])
                    .collect()
            })
            .collect()
    }

    fn knn_points(&self, own: usize, t: f64, k: usize) -> Vec<VariateTimePoint> {
        let n = self.variates.len();
        let mut heap = BinaryHeap::new();
        // Per variate: `left[v]` is one past the next unvisited entry going
        // down in time, `right[v]` the next going up. Earlier timestamps are
        // pushed a whole equal-timestamp group at a time so that ties keep
        // ascending sample order; `pending[v]` counts unpopped group members.
        let mut left = vec![0usize; n];
        let mut right = vec![0usize; n];
        let mut pending = vec![0usize; n];
        for (v, entries) in self.variates.iter().enumerate() {
            if v == own {
                continue;
            }
            let split = entries.partition_point(|e| e.timestamp < t);
            left[v] = split;
            right[v] = split;
            pending[v] = self.push_left_group(&mut heap, &mut left[v], v, t);
            self.push_right(&mut heap, &mut right[v], v, t);
        }
        let mut out = Vec::with_capacity(k.min(self.total));
        while out.len() < k {
            let Some(c) = heap.pop() else { break };
            out.push(self.to_point(c.variate, c.rank));
            let v = c.variate;
            if c.from_left {
                pending[v] -= 1;
                if pending[v] == 0 {
                    pending[v] = self.push_left_group(&mut heap, &mut left[v], v, t);
                }
            } else {
                self.push_right(&mut heap, &mut right[v], v, t);
            }
        }
        out.sort_by(canonical_cmp);
        out
    }

    fn push_right(&self, heap: &mut BinaryHeap<Candidate>, right: &mut usize, v: usize, t: f64) {
        if let Some(e) = self.variates[v].get(*right) {
            heap.push(Candidate {
                distance: (e.timestamp - t).abs(),
                timestamp: e.timestamp,
                variate: v,
                sample: e.sample,
                rank: *right,
                from_left: false,
            });
            *right += 1;
        }
    }

    /// Pushes the next lower equal-timestamp group; returns its size.
    fn push_left_group(
        &self,
        heap: &mut BinaryHeap<Candidate>,
        left: &mut usize,
        v: usize,
        t: f64,
    ) -> usize {
        if *left == 0 {
            return 0;
        }
        let entries = &self.variates[v];
        let ts = entries[*left - 1].timestamp;
        let start = entries[..*left].partition_point(|e| e.timestamp < ts);
        for (rank, e) in entries.iter().enumerate().take(*left).skip(start) {
            heap.push(Candidate {
                distance: (e.timestamp - t).abs(),
                timestamp: e.timestamp,
                variate: v,
                sample: e.sample,
                rank,
                from_left: true,
            });
        }
        let size = *left - start;
        *left = start;
        size
    }

    fn radius_points(&self, own: usize, t: f64, radius: f64) -> Vec<VariateTimePoint> {
        let mut out = Vec::new();
        for (v, entries) in self.variates.iter().enumerate() {
            if v == own {
                continue;
            }
            // Both bounds use the same `|t_m - t|` arithmetic as the filter.
            let start =
                entries.partition_point(|e| e.timestamp < t && (e.timestamp - t).abs() > radius);
            let end =
                entries.partition_point(|e| e.timestamp <= t || (e.timestamp - t).abs() <= radius);
            out.extend((start..end).map(|r| self.to_point(v, r)));
        }
        out.sort_by(canonical_cmp);
        out
    }
}

/// Linear-scan reference for inter-variate queries, applying the same
/// definition and tie rules as the index.
pub fn brute_force_inter(
    obs: &Observation,
    p: &VariateTimePoint,
    query: NeighborQuery,
) -> Vec<VariateTimePoint> {
    let distance = |q: &VariateTimePoint| (q.timestamp - p.timestamp).abs();
    let mut candidates: Vec<VariateTimePoint> =
        obs.points().filter(|q| q.variate != p.variate).collect();
    let mut selected = match query {
        NeighborQuery::Radius(r) => {
            candidates.retain(|q| distance(q) <= r);
            candidates
        }
        NeighborQuery::Knn(k) => {
            candidates.sort_by(|a, b| {
                distance(a)
                    .total_cmp(&distance(b))
                    .then(a.variate.cmp(&b.variate))
                    .then(a.timestamp.total_cmp(&b.timestamp))
                    .then(a.sample.cmp(&b.sample))
            });
            candidates.truncate(k);
            candidates
        }
    };
    selected.sort_by(canonical_cmp);
    selected
}
