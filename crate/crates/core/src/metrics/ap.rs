use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{iou, Detection};
use crate::data::{Annotations, AreaBuckets, BBox, SizeBucket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Points101,
    Points11,
}

impl Interpolation {
    fn n_points(self) -> usize {
        match self {
            Interpolation::Points101 => 101,
            Interpolation::Points11 => 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::Points101,
        }
    }
}

fn in_range(area: f64, range: (f64, f64)) -> bool {
    area >= range.0 && area < range.1
}

/// Ground truths of `class_id` whose area falls in `range`.
pub fn gt_count(gts: &Annotations, class_id: usize, range: (f64, f64)) -> usize {
    gts.values()
        .flatten()
        .filter(|b| b.class_id == class_id && in_range(b.area(), range))
        .count()
}

/// Descending confidence; equal confidences ordered by content so the result
/// does not depend on input order.
fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    let key = |d: &Detection| [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max];
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
        .then_with(|| {
            key(a)
                .iter()
                .zip(key(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// AP of one class at one IoU threshold, restricted to ground truths with area
/// in `range` (`[lo, hi)`). Ground truths outside the range are ignored: a
/// detection matched to one, or an unmatched detection whose own area lies
/// outside the range, counts neither as true nor false positive. `None` when
/// no ground truth falls in the range.
pub fn average_precision(
    dets: &[Detection],
    gts: &Annotations,
    class_id: usize,
    range: (f64, f64),
    cfg: &MatchConfig,
) -> Option<f64> {
    let n_gt = gt_count(gts, class_id, range);
    if n_gt == 0 {
        return None;
    }
    // Per sample: (box, ignored), non-ignored first so they win IoU ties.
    let mut pools: BTreeMap<&str, Vec<(BBox, bool)>> = BTreeMap::new();
    for (id, boxes) in gts {
        let mut v: Vec<(BBox, bool)> = boxes
            .iter()
            .filter(|b| b.class_id == class_id)
            .map(|b| (*b, !in_range(b.area(), range)))
            .collect();
        v.sort_by_key(|&(_, ignored)| ignored);
        pools.insert(id.as_str(), v);
    }
    let mut used: BTreeMap<&str, Vec<bool>> = pools.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();

    let mut ordered: Vec<&Detection> = dets.iter().filter(|d| d.bbox.class_id == class_id).collect();
    ordered.sort_by(|a, b| detection_order(a, b));

    let mut flags: Vec<bool> = Vec::with_capacity(ordered.len());
    for d in ordered {
        let mut best: Option<(usize, f64)> = None;
        if let (Some(pool), Some(taken)) = (pools.get(d.sample_id.as_str()), used.get(d.sample_id.as_str())) {
            for (gi, (g, ignored)) in pool.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                // Once a real match exists, ignored ground truths cannot replace it.
                if *ignored && best.is_some_and(|(bi, _)| !pool[bi].1) {
                    break;
                }
                let o = iou(&d.bbox, g);
                if o >= cfg.iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                used.get_mut(d.sample_id.as_str()).expect("pool exists")[gi] = true;
                if !pools[d.sample_id.as_str()][gi].1 {
                    flags.push(true);
                }
            }
            None => {
                if in_range(d.bbox.area(), range) {
                    flags.push(false);
                }
            }
        }
    }

    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for is_tp in flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Monotone precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let n_points = cfg.interpolation.n_points();
    let mut sum = 0.0;
    for k in 0..n_points {
        let r = k as f64 / (n_points - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / n_points as f64)
}

/// Unweighted mean of the defined values; `None` when none is defined.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Ground-truth instances per bucket, all classes.
    pub gt_small: usize,
    pub gt_medium: usize,
    pub gt_large: usize,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub buckets: AreaBuckets,
}

/// mAP over all areas plus per-bucket mAP.
pub fn evaluate(
    dets: &[Detection],
    gts: &Annotations,
    n_classes: usize,
    buckets: &AreaBuckets,
    cfg: &MatchConfig,
) -> EvalSummary {
    let all = (0.0, f64::INFINITY);
    let per_class: Vec<Option<f64>> = (0..n_classes).map(|c| average_precision(dets, gts, c, all, cfg)).collect();
    let bucket_map = |b: SizeBucket| {
        let r = buckets.range(b);
        let aps: Vec<Option<f64>> = (0..n_classes).map(|c| average_precision(dets, gts, c, r, cfg)).collect();
        let count = (0..n_classes).map(|c| gt_count(gts, c, r)).sum();
        (mean_ap(&aps), count)
    };
    let (ap_small, gt_small) = bucket_map(SizeBucket::Small);
    let (ap_medium, gt_medium) = bucket_map(SizeBucket::Medium);
    let (ap_large, gt_large) = bucket_map(SizeBucket::Large);
    EvalSummary {
        map: mean_ap(&per_class),
        ap_small,
        ap_medium,
        ap_large,
        per_class,
        gt_small,
        gt_medium,
        gt_large,
        iou_threshold: cfg.iou_threshold,
        interpolation: cfg.interpolation,
        buckets: *buckets,
    }
}
