use serde::{Deserialize, Serialize};

use super::model::{LevelOutput, Prediction};
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A box is routed to the finest level whose stride is at least
/// `max_side / SIZE_PER_STRIDE`.
pub const SIZE_PER_STRIDE: f64 = 4.0;

/// Grid of one prediction level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGeometry {
    pub fn of_prediction<T: Scalar>(pred: &Prediction<T>) -> Vec<LevelGeometry> {
        pred.levels.iter().map(LevelGeometry::of_level).collect()
    }

    fn of_level<T: Scalar>(l: &LevelOutput<T>) -> LevelGeometry {
        LevelGeometry {
            stride: l.stride,
            height: l.raw.height(),
            width: l.raw.width(),
        }
    }

    /// Geometry for an input of `height x width` at each stride.
    pub fn for_input(strides: &[usize], height: usize, width: usize) -> Vec<LevelGeometry> {
        strides
            .iter()
            .map(|&s| LevelGeometry {
                stride: s,
                height: height.div_ceil(s),
                width: width.div_ceil(s),
            })
            .collect()
    }
}

/// Regression target of one positive cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellTarget {
    pub class_id: usize,
    /// `(cx/s - x, cy/s - y, ln(w/s), ln(h/s))`
    pub offsets: [f64; 4],
    pub area: f64,
}

/// Positive cells of one image, per level, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub levels: Vec<LevelGeometry>,
    pub cells: Vec<Vec<Option<CellTarget>>>,
}

impl Targets {
    pub fn n_positives(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    pub fn get(&self, level: usize, y: usize, x: usize) -> Option<&CellTarget> {
        self.cells[level][y * self.levels[level].width + x].as_ref()
    }
}

/// Index of the level a box of this size is routed to. `levels` must be
/// ordered fine to coarse.
pub fn level_for_box(levels: &[LevelGeometry], b: &BBox) -> usize {
    let side = b.width().max(b.height());
    levels
        .iter()
        .position(|l| side <= SIZE_PER_STRIDE * l.stride as f64)
        .unwrap_or(levels.len() - 1)
}

/// One positive cell per box: the cell containing its center on the level its
/// size is routed to. Cell collisions keep the larger box, then the lower class.
pub fn assign_targets(boxes: &[BBox], levels: &[LevelGeometry]) -> Targets {
    let mut cells: Vec<Vec<Option<CellTarget>>> = levels.iter().map(|l| vec![None; l.height * l.width]).collect();
    for b in boxes {
        let li = level_for_box(levels, b);
        let l = levels[li];
        let s = l.stride as f64;
        let (cx, cy) = b.center();
        let x = ((cx / s).floor().max(0.0) as usize).min(l.width - 1);
        let y = ((cy / s).floor().max(0.0) as usize).min(l.height - 1);
        let t = CellTarget {
            class_id: b.class_id,
            offsets: [
                cx / s - x as f64,
                cy / s - y as f64,
                (b.width() / s).ln(),
                (b.height() / s).ln(),
            ],
            area: b.area(),
        };
        let slot = &mut cells[li][y * l.width + x];
        let wins = match slot {
            None => true,
            Some(o) => t.area > o.area || (t.area == o.area && t.class_id < o.class_id),
        };
        if wins {
            *slot = Some(t);
        }
    }
    Targets {
        levels: levels.to_vec(),
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, bbox: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.cls >= 0.0 && self.bbox >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got cls={} box={}",
                self.cls, self.bbox
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub n_positives: usize,
}

impl LossBreakdown {
    /// No positive cell: box term is 0 and cls is pure negative objectness.
    pub fn is_background_only(&self) -> bool {
        self.n_positives == 0
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

/// Loss of a batch (mean over images) and its gradient w.r.t. every head
/// output. `targets[n]` belongs to batch element `n`.
pub fn detection_loss<T: Scalar>(
    pred: &Prediction<T>,
    targets: &[Targets],
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    weights.validate()?;
    let batch = pred.levels.first().map_or(0, |l| l.raw.batch());
    if targets.len() != batch {
        return Err(Error::Contract(format!(
            "{} target sets for a batch of {batch}",
            targets.len()
        )));
    }
    for t in targets {
        if t.levels != LevelGeometry::of_prediction(pred) {
            return Err(Error::Contract("target geometry does not match prediction".into()));
        }
    }
    let nc = pred.n_classes;
    let mut grads: Vec<Tensor<T>> = pred.levels.iter().map(|l| Tensor::zeros(l.raw.shape())).collect();
    let (mut total, mut cls_sum, mut box_sum) = (0.0, 0.0, 0.0);
    let mut n_pos_total = 0;
    let inv_batch = 1.0 / batch.max(1) as f64;
    let mut logits = vec![0.0; nc];

    for (n, tg) in targets.iter().enumerate() {
        let n_pos = tg.n_positives();
        n_pos_total += n_pos;
        let norm = 1.0 / n_pos.max(1) as f64;
        let (mut cls, mut bx) = (0.0, 0.0);
        for (li, level) in pred.levels.iter().enumerate() {
            let raw = &level.raw;
            let g = &mut grads[li];
            let (h, w) = (raw.height(), raw.width());
            for y in 0..h {
                for x in 0..w {
                    let z = raw.get(n, 0, y, x).as_f64();
                    let target = tg.get(li, y, x);
                    let t = if target.is_some() { 1.0 } else { 0.0 };
                    cls += softplus(z) - t * z;
                    let dz = (sigmoid(z) - t) * norm * weights.cls * inv_batch;
                    let i = g.index(n, 0, y, x);
                    g.data_mut()[i] = T::of(dz);

                    let Some(ct) = target else { continue };
                    for (c, l) in logits.iter_mut().enumerate() {
                        *l = raw.get(n, 1 + c, y, x).as_f64();
                    }
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
                    cls += lse - logits[ct.class_id];
                    for (c, &l) in logits.iter().enumerate() {
                        let p = (l - lse).exp();
                        let d = p - if c == ct.class_id { 1.0 } else { 0.0 };
                        let i = g.index(n, 1 + c, y, x);
                        g.data_mut()[i] = T::of(d * norm * weights.cls * inv_batch);
                    }
                    for k in 0..4 {
                        let d = raw.get(n, 1 + nc + k, y, x).as_f64() - ct.offsets[k];
                        bx += smooth_l1(d);
                        let i = g.index(n, 1 + nc + k, y, x);
                        g.data_mut()[i] = T::of(smooth_l1_grad(d) * norm * weights.bbox * inv_batch);
                    }
                }
            }
        }
        let (cls, bx) = (cls * norm, bx * norm);
        cls_sum += cls;
        box_sum += bx;
        total += weights.cls * cls + weights.bbox * bx;
    }
    let breakdown = LossBreakdown {
        total: total * inv_batch,
        cls_loss: cls_sum * inv_batch,
        box_loss: box_sum * inv_batch,
        n_positives: n_pos_total,
    };
    Ok((breakdown, grads))
}
