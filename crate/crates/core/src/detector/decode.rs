use serde::{Deserialize, Serialize};

use super::model::Prediction;
use crate::data::BBox;
use crate::metrics::{iou, Detection};
use crate::scalar::Scalar;

/// Upper bound on the decoded log-size offset; keeps `exp` finite.
const MAX_LOG_SIZE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Detections of batch element `n`: score = objectness x class probability,
/// boxes clipped to the image, class-wise NMS, capped by confidence.
pub fn decode<T: Scalar>(
    pred: &Prediction<T>,
    n: usize,
    sample_id: &str,
    image_size: (usize, usize),
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands = Vec::new();
    for (li, level) in pred.levels.iter().enumerate() {
        let s = level.stride as f64;
        for y in 0..level.raw.height() {
            for x in 0..level.raw.width() {
                let obj = pred.objectness(li, n, y, x).as_f64();
                if obj < cfg.score_threshold {
                    continue;
                }
                let scores = pred.class_scores(li, n, y, x);
                let [tx, ty, tw, th] = pred.box_offsets(li, n, y, x).map(|v| v.as_f64());
                let cx = (x as f64 + tx) * s;
                let cy = (y as f64 + ty) * s;
                let w = tw.min(MAX_LOG_SIZE).exp() * s;
                let h = th.min(MAX_LOG_SIZE).exp() * s;
                for (c, p) in scores.iter().enumerate() {
                    let score = obj * p.as_f64();
                    if score < cfg.score_threshold || !score.is_finite() {
                        continue;
                    }
                    let raw = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
                    let Ok(b) = BBox::new(raw[0], raw[1], raw[2], raw[3], c) else { continue };
                    if let Some(b) = b.clamped(img_w, img_h) {
                        cands.push(Detection {
                            sample_id: sample_id.to_string(),
                            bbox: b,
                            confidence: score,
                        });
                    }
                }
            }
        }
    }
    let mut kept = nms(cands, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Greedy class-wise non-maximum suppression. Output is sorted by descending
/// confidence; equal confidences keep input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.bbox.class_id == d.bbox.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
