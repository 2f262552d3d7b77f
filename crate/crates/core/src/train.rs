//! Mini-batch SGD with momentum and weight decay, cosine learning-rate decay,
//! horizontal-flip augmentation, checkpoints, and dataset evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AreaBuckets, DetectionSample};
use crate::detector::{
    assign_targets, decode, detection_loss, DecodeConfig, Detector, LevelGeometry, LossBreakdown, LossWeights, Mode,
    NodeKind, NodeParams,
};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{evaluate, Detection, EvalSummary, MatchConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear warm-up from `lr / 10`.
    pub warmup_epochs: usize,
    pub hflip: bool,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 0,
            hflip: true,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        self.loss.validate()
    }

    /// Cosine decay from `lr` to 0 over `total_steps`, after warm-up.
    pub fn lr_at(&self, step: usize, total_steps: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        if step < warm {
            let f = step as f64 / warm as f64;
            return self.lr * (0.1 + 0.9 * f);
        }
        let span = (total_steps - warm).max(1) as f64;
        let t = (step - warm) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Detector<f32>,
    pub epochs_trained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<NodeParams<f32>>>,
}

impl Checkpoint {
    pub fn fresh(model: Detector<f32>) -> Self {
        Self {
            model,
            epochs_trained: 0,
            velocity: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = io::read_json(path)?;
        c.model.check_consistency()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
}

fn zeros_like(params: &[NodeParams<f32>]) -> Vec<NodeParams<f32>> {
    params
        .iter()
        .map(|p| match p {
            NodeParams::None => NodeParams::None,
            NodeParams::Conv { weight, bias } => NodeParams::Conv {
                weight: vec![0.0; weight.len()],
                bias: bias.as_ref().map(|b| vec![0.0; b.len()]),
            },
            NodeParams::Norm { gamma, beta, .. } => NodeParams::Norm {
                gamma: vec![0.0; gamma.len()],
                beta: vec![0.0; beta.len()],
                running_mean: Vec::new(),
                running_var: Vec::new(),
            },
        })
        .collect()
}

/// `v = m v + g + wd w; w -= lr v`, decay on conv filters only.
fn sgd_step(values: &mut [f32], grads: &[f32], vel: &mut [f32], lr: f32, momentum: f32, decay: f32) {
    for ((w, g), v) in values.iter_mut().zip(grads).zip(vel.iter_mut()) {
        *v = momentum * *v + *g + decay * *w;
        *w -= lr * *v;
    }
}

fn flip_sample(s: &DetectionSample) -> DetectionSample {
    let [_, c, h, w] = s.image.shape();
    let mut img = Tensor::zeros([1, c, h, w]);
    for ch in 0..c {
        let src = s.image.plane(0, ch);
        let dst = img.plane_mut(0, ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * w + (w - 1 - x)];
            }
        }
    }
    DetectionSample {
        sample_id: s.sample_id.clone(),
        image: img,
        boxes: s.boxes.iter().map(|b| b.hflipped(w as f64)).collect(),
    }
}

/// Train `epochs` more epochs. The schedule spans `cfg.epochs` in total, so a
/// resumed run continues where the checkpoint left off.
pub fn train(
    ckpt: &mut Checkpoint,
    data: &[DetectionSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut velocity = match ckpt.velocity.take() {
        Some(v) => v,
        None => zeros_like(ckpt.model.params()),
    };
    let model = &mut ckpt.model;
    let decay_mask: Vec<bool> = model
        .graph()
        .nodes()
        .iter()
        .map(|n| matches!(n.kind, NodeKind::Conv { .. } | NodeKind::Head { .. }))
        .collect();
    let mut logs = Vec::new();
    for epoch in ckpt.epochs_trained..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut cls, mut bx) = (0.0, 0.0, 0.0);
        let mut lr = cfg.lr;
        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + step_in_epoch;
            lr = cfg.lr_at(step, total_steps, steps_per_epoch);
            let batch: Vec<DetectionSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.hflip && rng.random_bool(0.5) {
                        flip_sample(&data[i])
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let loss = train_step(model, &mut velocity, &batch, cfg, lr as f32, &decay_mask)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step_in_epoch,
                    loss: loss.total,
                });
            }
            sum += loss.total * chunk.len() as f64;
            cls += loss.cls_loss * chunk.len() as f64;
            bx += loss.box_loss * chunk.len() as f64;
        }
        let n = data.len() as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: sum / n,
            cls_loss: cls / n,
            box_loss: bx / n,
        };
        log::info!(
            "epoch {} lr {:.5} loss {:.4} (cls {:.4}, box {:.4})",
            epoch + 1,
            log.lr,
            log.loss,
            log.cls_loss,
            log.box_loss
        );
        on_epoch(&log);
        logs.push(log);
        ckpt.epochs_trained = epoch + 1;
    }
    ckpt.velocity = Some(velocity);
    Ok(logs)
}

fn train_step(
    model: &mut Detector<f32>,
    velocity: &mut [NodeParams<f32>],
    batch: &[DetectionSample],
    cfg: &TrainConfig,
    lr: f32,
    decay_mask: &[bool],
) -> Result<LossBreakdown> {
    let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
    let input = Tensor::stack(&images);
    let trace = model.forward_traced(&input, Mode::Train, None)?;
    let pred = model.prediction_from_trace(&trace);
    let levels = LevelGeometry::of_prediction(&pred);
    let targets: Vec<_> = batch.iter().map(|s| assign_targets(&s.boxes, &levels)).collect();
    let (loss, head_grads) = detection_loss(&pred, &targets, cfg.loss)?;
    if !loss.total.is_finite() {
        return Ok(loss);
    }
    let grads = model.backward(&trace, head_grads, true);
    let (m, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
    for (i, ((p, g), v)) in model
        .params_mut()
        .iter_mut()
        .zip(&grads.params)
        .zip(velocity.iter_mut())
        .enumerate()
    {
        match (p, g, v) {
            (
                NodeParams::Conv { weight, bias },
                NodeParams::Conv {
                    weight: gw,
                    bias: gb,
                },
                NodeParams::Conv {
                    weight: vw,
                    bias: vb,
                },
            ) => {
                let decay = if decay_mask[i] { wd } else { 0.0 };
                sgd_step(weight, gw, vw, lr, m, decay);
                if let (Some(b), Some(gb), Some(vb)) = (bias.as_mut(), gb.as_ref(), vb.as_mut()) {
                    sgd_step(b, gb, vb, lr, m, 0.0);
                }
            }
            (
                NodeParams::Norm { gamma, beta, .. },
                NodeParams::Norm {
                    gamma: gg,
                    beta: gbeta,
                    ..
                },
                NodeParams::Norm {
                    gamma: vg,
                    beta: vbeta,
                    ..
                },
            ) => {
                sgd_step(gamma, gg, vg, lr, m, 0.0);
                sgd_step(beta, gbeta, vbeta, lr, m, 0.0);
            }
            _ => {}
        }
    }
    Ok(loss)
}

/// Batch size used for inference passes.
const EVAL_BATCH: usize = 16;

/// Decoded detections for every sample, in sample order.
pub fn detect(model: &Detector<f32>, samples: &[DetectionSample], cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let pred = model.predict(&Tensor::stack(&images))?;
        for (n, s) in chunk.iter().enumerate() {
            out.extend(decode(&pred, n, &s.sample_id, s.image_size(), cfg));
        }
    }
    Ok(out)
}

/// Detect and score a split.
pub fn evaluate_model(
    model: &Detector<f32>,
    samples: &[DetectionSample],
    n_classes: usize,
    buckets: &AreaBuckets,
) -> Result<(EvalSummary, Vec<Detection>)> {
    let dets = detect(model, samples, &DecodeConfig::default())?;
    let gts = samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.boxes.clone()))
        .collect();
    Ok((evaluate(&dets, &gts, n_classes, buckets, &MatchConfig::default()), dets))
}
