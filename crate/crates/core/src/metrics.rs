//! Center-distance detection metrics: greedy matching, interpolated AP,
//! and mean translation / orientation error over matches.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CENTER_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 2],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Contract(format!(
                "detection confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !self.center.iter().all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::Contract("detection has non-finite geometry".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

/// Per-prediction outcome, in descending confidence order per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    /// `(pred index, true positive)` for every prediction, ranked within its
    /// class by confidence.
    pub ranked: Vec<(usize, bool)>,
}

fn bev_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Indices of `preds` in descending confidence, ties by lower index.
fn confidence_order(preds: &[Detection], class: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class).collect();
    idx.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    idx
}

fn classes_of(preds: &[Detection], gts: &[Detection]) -> Vec<usize> {
    let mut classes: Vec<usize> = preds.iter().chain(gts).map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Per class, predictions in descending confidence each take the nearest
/// unmatched ground truth within `threshold` meters (ties by lower index).
pub fn match_detections(preds: &[Detection], gts: &[Detection], threshold: f64) -> Result<MatchResult> {
    for p in preds {
        p.check()?;
    }
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("matching threshold {threshold} is negative")));
    }
    let mut matches = Vec::new();
    let mut ranked = Vec::new();
    let mut taken = vec![false; gts.len()];
    for class in classes_of(preds, gts) {
        for pi in confidence_order(preds, class) {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, gt)| gt.class_id == class && !taken[*g])
                .map(|(g, gt)| (g, bev_distance(preds[pi].center, gt.center)))
                .filter(|&(_, dist)| dist <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match best {
                Some((g, distance)) => {
                    taken[g] = true;
                    matches.push(Match { pred: pi, gt: g, distance });
                    ranked.push((pi, true));
                }
                None => ranked.push((pi, false)),
            }
        }
    }
    Ok(MatchResult { matches, ranked })
}

/// 101-point interpolated AP from a ranked true-positive sequence.
pub fn interpolated_ap(tp_ranked: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_ranked.len());
    let mut recall = Vec::with_capacity(tp_ranked.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_ranked.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for step in 0..RECALL_POINTS {
        let r = step as f64 / (RECALL_POINTS - 1) as f64;
        if let Some(k) = recall.iter().position(|&rc| rc >= r - 1e-12) {
            total += precision[k];
        }
    }
    total / RECALL_POINTS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// AP per threshold, aligned with `ApReport::thresholds`.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with ground truth and all thresholds.
    pub map: f64,
}

pub fn average_precision(preds: &[Detection], gts: &[Detection], thresholds: &[f64]) -> Result<ApReport> {
    let mut gt_classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    gt_classes.sort_unstable();
    gt_classes.dedup();
    let mut per_class: Vec<ClassAp> = gt_classes
        .iter()
        .map(|&c| ClassAp { class_id: c, ap: Vec::with_capacity(thresholds.len()) })
        .collect();
    for &t in thresholds {
        let result = match_detections(preds, gts, t)?;
        for entry in per_class.iter_mut() {
            let tps: Vec<bool> = result
                .ranked
                .iter()
                .filter(|(p, _)| preds[*p].class_id == entry.class_id)
                .map(|&(_, hit)| hit)
                .collect();
            let num_gt = gts.iter().filter(|g| g.class_id == entry.class_id).count();
            entry.ap.push(interpolated_ap(&tps, num_gt));
        }
    }
    let values: Vec<f64> = per_class.iter().flat_map(|c| c.ap.iter().copied()).collect();
    let map = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
    Ok(ApReport {
        thresholds: thresholds.to_vec(),
        per_class,
        map,
    })
}

/// Smallest absolute angle between two yaws, in `[0, pi]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// `(ATE, AOE)` over matches; `(0, 0)` when there are none.
pub fn translation_orientation_errors(matches: &[Match], preds: &[Detection], gts: &[Detection]) -> (f64, f64) {
    if matches.is_empty() {
        return (0.0, 0.0);
    }
    let n = matches.len() as f64;
    let ate = matches
        .iter()
        .map(|m| bev_distance(preds[m.pred].center, gts[m.gt].center))
        .sum::<f64>()
        / n;
    let aoe = matches
        .iter()
        .map(|m| yaw_difference(preds[m.pred].yaw, gts[m.gt].yaw))
        .sum::<f64>()
        / n;
    (ate, aoe)
}
