//! Independent scalar oracles and random fixtures shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salprune::data::{Annotations, BBox, DetectionSample};
use salprune::detector::{assign_targets, detection_loss, Detector, LevelGeometry, LossWeights, Mode};
use salprune::metrics::Detection;
use salprune::reweight::{DecayKind, DecaySpec};
use salprune::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cells of one axis touched by `[lo, hi)`; a span thinner than a cell
/// becomes the single cell holding its midpoint.
fn cells_on_axis(lo: f64, hi: f64, stride: f64, n: usize) -> (usize, usize) {
    if hi - lo < stride {
        let c = (((lo + hi) / 2.0 / stride).floor() as usize).min(n - 1);
        return (c, c + 1);
    }
    let touched: Vec<usize> = (0..n)
        .filter(|&x| (x as f64) * stride < hi && (x as f64 + 1.0) * stride > lo)
        .collect();
    (touched[0], touched[touched.len() - 1] + 1)
}

/// Per-cell coefficient map and region for `boxes`, evaluated cell by cell.
pub fn oracle_mask(
    boxes: &[BBox],
    h: usize,
    w: usize,
    stride: usize,
    margin: f64,
    decay: &DecaySpec,
) -> (Vec<f64>, Vec<bool>) {
    let s = stride as f64;
    let mut beta = vec![0.0f64; h * w];
    let mut region = vec![false; h * w];
    for b in boxes {
        let (x0, x1) = cells_on_axis(b.x_min, b.x_max, s, w);
        let (y0, y1) = cells_on_axis(b.y_min, b.y_max, s, h);
        let mx = (margin * (x1 - x0) as f64).ceil() as i64;
        let my = (margin * (y1 - y0) as f64).ceil() as i64;
        let cx = (x0 + x1) as f64 / 2.0;
        let cy = (y0 + y1) as f64 / 2.0;
        let e = ((x1 - x0).min(y1 - y0)) as f64 / 2.0;
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as i64, y as i64);
                let in_relaxed = xi >= x0 as i64 - mx && xi < x1 as i64 + mx && yi >= y0 as i64 - my && yi < y1 as i64 + my;
                if !in_relaxed {
                    continue;
                }
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let r = d2.sqrt();
                let v = if inside {
                    1.0
                } else {
                    match decay.kind {
                        DecayKind::Power => (e.powi(2) / d2).powf(decay.s).min(1.0),
                        DecayKind::Exponential if r > e => (-(r - e) / (decay.tau * e)).exp(),
                        DecayKind::FlatTopGaussian if r > e => {
                            (-(r - e).powi(2) / (2.0 * (decay.sigma * e).powi(2))).exp()
                        }
                        _ => 1.0,
                    }
                };
                let i = y * w + x;
                region[i] = true;
                beta[i] = beta[i].max(v);
            }
        }
    }
    (beta, region)
}

/// `sum beta * max(0, g)`.
pub fn oracle_saliency(grad: &[f64], beta: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..grad.len() {
        if grad[i] > 0.0 {
            s += beta[i] * grad[i];
        }
    }
    s
}

/// Sum over `region` of min-max normalized `max(0, w * a)`.
pub fn oracle_importance(w: f64, act: &[f64], region: &[bool]) -> f64 {
    let vals: Vec<f64> = (0..act.len())
        .filter(|&i| region[i])
        .map(|i| if w * act[i] > 0.0 { w * act[i] } else { 0.0 })
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return 0.0;
    }
    vals.iter().map(|v| (v - lo) / (hi - lo)).sum()
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / ((a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter)
}

/// Brute-force 101-point AP over the full area range. Detections are taken in
/// descending confidence (callers use distinct confidences); each grabs the
/// unmatched same-class ground truth of its image with the highest IoU at or
/// above `thr`.
pub fn oracle_ap(dets: &[Detection], gts: &Annotations, class_id: usize, thr: f64) -> Option<f64> {
    let n_gt = gts.values().flatten().filter(|b| b.class_id == class_id).count();
    if n_gt == 0 {
        return None;
    }
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.bbox.class_id == class_id).collect();
    ds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut taken: std::collections::HashSet<(String, usize)> = Default::default();
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, d) in ds.iter().enumerate() {
        let mut best = None;
        let mut best_iou = thr;
        if let Some(g) = gts.get(&d.sample_id) {
            for (j, gb) in g.iter().enumerate() {
                if gb.class_id != class_id || taken.contains(&(d.sample_id.clone(), j)) {
                    continue;
                }
                let o = overlap(&d.bbox, gb);
                if o >= best_iou && (best.is_none() || o > best_iou) {
                    best = Some(j);
                    best_iou = o;
                }
            }
        }
        if let Some(j) = best {
            taken.insert((d.sample_id.clone(), j));
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / 101.0)
}

/// Random image-sized box with sides in `[min_side, max_side]`.
pub fn random_box(rng: &mut impl Rng, size: f64, min_side: f64, max_side: f64, class_id: usize) -> BBox {
    let w = rng.random_range(min_side..=max_side).min(size - 1e-3);
    let h = rng.random_range(min_side..=max_side).min(size - 1e-3);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox::new(x, y, x + w, y + h, class_id).unwrap()
}

pub fn random_sample(rng: &mut impl Rng, id: &str, size: usize, n_boxes: usize, n_classes: usize) -> DetectionSample {
    let data = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
    let boxes = (0..n_boxes)
        .map(|_| {
            let c = rng.random_range(0..n_classes);
            random_box(rng, size as f64, 4.0, size as f64 / 2.0, c)
        })
        .collect();
    DetectionSample {
        sample_id: id.into(),
        image: Tensor::from_vec([1, 3, size, size], data),
        boxes,
    }
}

/// Total detection loss with `delta` added to one activation coordinate.
pub fn perturbed_loss(
    model: &Detector<f64>,
    sample: &DetectionSample,
    node: usize,
    coord: usize,
    delta: f64,
    weights: LossWeights,
) -> f64 {
    let mut m = model.clone();
    let input: Tensor<f64> = sample.image.cast();
    let edit = move |i: usize, t: &mut Tensor<f64>| {
        if i == node {
            t.data_mut()[coord] += delta;
        }
    };
    let trace = m.forward_traced(&input, Mode::Eval, Some(&edit)).unwrap();
    let pred = m.prediction_from_trace(&trace);
    let targets = assign_targets(&sample.boxes, &LevelGeometry::of_prediction(&pred));
    detection_loss(&pred, &[targets], weights).unwrap().0.total
}
