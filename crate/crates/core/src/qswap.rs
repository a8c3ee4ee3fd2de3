//! Interactive query swap sampling.
//!
//! Each query predicts `K_base` deformable sampling points per BEV grid.
//! Neighbors are the top-N queries by shared self-attention affinity that
//! also lie within a size-adaptive radius. Neighbor points are ranked by
//! `s + lambda * ln(a)` and accepted greedily under a per-neighbor cap and a
//! total cap, then either appended to the query's own set or written over
//! its lowest-scoring base points. Scores of the final set are softmaxed
//! jointly.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridKind;
use crate::kernel::{softmax, Linear, Matrix};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    Base,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint<T> {
    /// Metric BEV displacement from the owner's position.
    pub offset: [T; 2],
    /// Raw logit for base points, the ranked score for shared points.
    pub score: T,
    pub owner: usize,
    pub origin: SampleOrigin,
    /// Query that predicted the point (the owner for base points).
    pub source: usize,
    /// Index of the point in its source's base set.
    pub point_index: usize,
    pub grid: GridKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapMode {
    Append,
    Replace,
}

impl FromStr for SwapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "append" => Ok(SwapMode::Append),
            "replace" => Ok(SwapMode::Replace),
            other => Err(Error::Config(format!("unknown swap mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QSwapConfig {
    /// Radius factor on the predicted box diagonal.
    pub alpha: f64,
    /// Strength of the affinity prior.
    pub lambda: f64,
    /// Neighbors kept after ranking by affinity.
    pub neighbors: usize,
    pub k_base: usize,
    /// Max points taken from a single neighbor.
    pub k_per: usize,
    /// Max shared points received in total.
    pub k_extra: usize,
    pub mode: SwapMode,
    /// Lower bound applied to affinities before the log.
    pub affinity_floor: f64,
    /// Replaces the adaptive radius with a constant (meters) when set.
    pub fixed_radius: Option<f64>,
}

impl Default for QSwapConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            lambda: 1.0,
            neighbors: 4,
            k_base: 20,
            k_per: 2,
            k_extra: 4,
            mode: SwapMode::Append,
            affinity_floor: 1e-8,
            fixed_radius: None,
        }
    }
}

impl QSwapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_base == 0 {
            return Err(Error::Config("k_base must be positive".into()));
        }
        if self.k_per > self.k_extra {
            return Err(Error::Config(format!(
                "k_per ({}) exceeds k_extra ({})",
                self.k_per, self.k_extra
            )));
        }
        if self.mode == SwapMode::Replace && self.k_extra > self.k_base {
            return Err(Error::Config(format!(
                "replace mode cannot overwrite {} of {} base points",
                self.k_extra, self.k_base
            )));
        }
        if !(self.alpha > 0.0) || !(self.affinity_floor > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("alpha and affinity_floor must be positive, lambda finite".into()));
        }
        if let Some(r) = self.fixed_radius {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("fixed radius {r} is negative")));
            }
        }
        Ok(())
    }

    /// Capacity of one per-query, per-grid set after swapping.
    pub fn max_set_size(&self) -> usize {
        match self.mode {
            SwapMode::Append => self.k_base + self.k_extra,
            SwapMode::Replace => self.k_base,
        }
    }
}

/// Linear sampling head: embedding -> `K x (dx, dy, score)`, offsets scaled
/// by `range` meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingHead<T> {
    pub linear: Linear<T>,
    pub range: T,
}

/// Base `(offset, score)` pairs for one query on one grid.
pub fn predict_base_samples<T: Real>(embedding: &[T], head: &SamplingHead<T>, k_base: usize) -> Result<Vec<([T; 2], T)>> {
    if head.linear.output_dim() != 3 * k_base {
        return Err(Error::Dimension(format!(
            "sampling head emits {} values, {k_base} points need {}",
            head.linear.output_dim(),
            3 * k_base
        )));
    }
    let raw = head.linear.forward(embedding)?;
    Ok(raw
        .chunks_exact(3)
        .map(|c| ([c[0] * head.range, c[1] * head.range], c[2]))
        .collect())
}

/// Base points for one query on one grid, wrapped as [`SamplePoint`]s.
pub fn base_points<T: Real>(owner: usize, grid: GridKind, samples: &[([T; 2], T)]) -> Vec<SamplePoint<T>> {
    samples
        .iter()
        .enumerate()
        .map(|(k, &(offset, score))| SamplePoint {
            offset,
            score,
            owner,
            origin: SampleOrigin::Base,
            source: owner,
            point_index: k,
            grid,
        })
        .collect()
}

/// `alpha * sqrt(w^2 + l^2)`, or the fixed radius when configured.
pub fn query_radius<T: Real>(w: T, l: T, cfg: &QSwapConfig) -> T {
    match cfg.fixed_radius {
        Some(r) => T::of(r),
        None => T::of(cfg.alpha) * (w * w + l * l).sqrt(),
    }
}

#[inline]
fn bev_distance<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Top-`N` queries by affinity (self excluded, ties by lower id), filtered
/// to those whose BEV center is within query `i`'s radius. Returned in
/// affinity order.
pub fn select_neighbors<T: Real>(
    i: usize,
    affinity_row: &[T],
    size_wl: (T, T),
    positions: &[[T; 3]],
    cfg: &QSwapConfig,
) -> Result<Vec<usize>> {
    if affinity_row.len() != positions.len() || i >= positions.len() {
        return Err(Error::Dimension(format!(
            "affinity row of {} for {} positions (query {i})",
            affinity_row.len(),
            positions.len()
        )));
    }
    let mut ranked: Vec<usize> = (0..affinity_row.len()).filter(|&j| j != i).collect();
    ranked.sort_by(|&a, &b| {
        affinity_row[b]
            .partial_cmp(&affinity_row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ranked.truncate(cfg.neighbors);
    let radius = query_radius(size_wl.0, size_wl.1, cfg);
    ranked.retain(|&j| bev_distance(&positions[i], &positions[j]) <= radius);
    Ok(ranked)
}

/// `s + lambda * ln(max(a, floor))`
#[inline]
pub fn score_shared_points<T: Real>(score: T, affinity: T, lambda: T, floor: T) -> T {
    score + lambda * affinity.max(floor).ln()
}

/// Greedy acceptance in descending score under the two caps. `candidates`
/// are `(neighbor, score)`; ties break toward the earlier candidate. Returns
/// accepted candidate indices in acceptance order.
pub fn greedy_select<T: Real>(candidates: &[(usize, T)], k_per: usize, k_extra: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut accepted = Vec::with_capacity(k_extra);
    for idx in order {
        if accepted.len() >= k_extra {
            break;
        }
        let nb = candidates[idx].0;
        let slot = match taken.iter_mut().find(|(n, _)| *n == nb) {
            Some(s) => s,
            None => {
                taken.push((nb, 0));
                taken.last_mut().expect("just pushed")
            }
        };
        if slot.1 < k_per {
            slot.1 += 1;
            accepted.push(idx);
        }
    }
    accepted
}

/// Augments every query's base set for one grid with points shared by its
/// neighbors. `base[i]` must hold only query `i`'s base points.
pub fn swap_samples<T: Real>(
    base: &[Vec<SamplePoint<T>>],
    positions: &[[T; 3]],
    neighbors: &[Vec<usize>],
    affinity: &Matrix<T>,
    cfg: &QSwapConfig,
) -> Result<Vec<Vec<SamplePoint<T>>>> {
    cfg.validate()?;
    let n = base.len();
    if positions.len() != n || neighbors.len() != n || affinity.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "swap over {n} sets given {} positions, {} neighbor lists, {:?} affinity",
            positions.len(),
            neighbors.len(),
            affinity.shape()
        )));
    }
    let lambda = T::of(cfg.lambda);
    let floor = T::of(cfg.affinity_floor);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pool: Vec<(usize, T)> = Vec::new();
        let mut pool_points: Vec<&SamplePoint<T>> = Vec::new();
        // Pool in (neighbor id, point index) order so equal scores break low.
        let mut by_id = neighbors[i].clone();
        by_id.sort_unstable();
        for &j in &by_id {
            let a = affinity.get(i, j);
            for p in base[j].iter().filter(|p| p.origin == SampleOrigin::Base) {
                pool.push((j, score_shared_points(p.score, a, lambda, floor)));
                pool_points.push(p);
            }
        }
        let accepted = greedy_select(&pool, cfg.k_per, cfg.k_extra);
        let shared: Vec<SamplePoint<T>> = accepted
            .iter()
            .map(|&c| {
                let p = pool_points[c];
                let j = pool[c].0;
                // Keep the absolute BEV location, re-expressed relative to i.
                let abs = [positions[j][0] + p.offset[0], positions[j][1] + p.offset[1]];
                SamplePoint {
                    offset: [abs[0] - positions[i][0], abs[1] - positions[i][1]],
                    score: pool[c].1,
                    owner: i,
                    origin: SampleOrigin::Shared,
                    source: j,
                    point_index: p.point_index,
                    grid: p.grid,
                }
            })
            .collect();
        let mut set = base[i].clone();
        match cfg.mode {
            SwapMode::Append => set.extend(shared),
            SwapMode::Replace => {
                let mut slots: Vec<usize> = (0..set.len()).collect();
                slots.sort_by(|&a, &b| {
                    set[a]
                        .score
                        .partial_cmp(&set[b].score)
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for (slot, point) in slots.into_iter().zip(shared) {
                    set[slot] = point;
                }
            }
        }
        out.push(set);
    }
    Ok(out)
}

/// Softmax over the scores of one per-query, per-grid set.
pub fn normalize_sample_scores<T: Real>(set: &[SamplePoint<T>]) -> Vec<T> {
    let scores: Vec<T> = set.iter().map(|p| p.score).collect();
    softmax(&scores)
}

/// Flat record of one sampling point for debugging dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub owner: usize,
    pub grid: GridKind,
    pub origin: SampleOrigin,
    pub source: usize,
    pub position: [f64; 2],
    pub score: f64,
    pub weight: f64,
}

pub fn sample_records<T: Real>(set: &[SamplePoint<T>], owner_position: [T; 3]) -> Vec<SampleRecord> {
    let weights = normalize_sample_scores(set);
    set.iter()
        .zip(weights)
        .map(|(p, w)| SampleRecord {
            owner: p.owner,
            grid: p.grid,
            origin: p.origin,
            source: p.source,
            position: [
                (owner_position[0] + p.offset[0]).to_f64_lossy(),
                (owner_position[1] + p.offset[1]).to_f64_lossy(),
            ],
            score: p.score.to_f64_lossy(),
            weight: w.to_f64_lossy(),
        })
        .collect()
}
