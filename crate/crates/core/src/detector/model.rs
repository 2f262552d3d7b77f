use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{GraphBuilder, ModelGraph, NodeKind};
use super::ops::{self, ConvGeom, NormCache};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Prior probability the objectness bias is initialized to.
const OBJECTNESS_PRIOR: f64 = 0.01;

/// Head output layout: `[objectness, class_0 .. class_{C-1}, tx, ty, tw, th]`.
pub fn head_channels(n_classes: usize) -> usize {
    n_classes + 5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", tag = "type", rename_all = "snake_case")]
pub enum NodeParams<T> {
    None,
    Conv {
        /// `cout x cin x k x k`
        weight: Vec<T>,
        bias: Option<Vec<T>>,
    },
    Norm {
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
}

impl<T: Scalar> NodeParams<T> {
    /// Learnable parameter count (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        match self {
            NodeParams::None => 0,
            NodeParams::Conv { weight, bias } => weight.len() + bias.as_ref().map_or(0, Vec::len),
            NodeParams::Norm { gamma, beta, .. } => gamma.len() + beta.len(),
        }
    }

    fn cast<U: Scalar>(&self) -> NodeParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        match self {
            NodeParams::None => NodeParams::None,
            NodeParams::Conv { weight, bias } => NodeParams::Conv {
                weight: c(weight),
                bias: bias.as_ref().map(c),
            },
            NodeParams::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => NodeParams::Norm {
                gamma: c(gamma),
                beta: c(beta),
                running_mean: c(running_mean),
                running_var: c(running_var),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in norms; running statistics are updated.
    Train,
    /// Running statistics in norms.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorConfig {
    pub n_classes: usize,
    pub width_multiplier: f64,
    pub seed: u64,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            width_multiplier: 1.0,
            seed: 0,
        }
    }
}

/// Stage widths at `width_multiplier = 1`.
pub const BASE_WIDTHS: [usize; 4] = [16, 32, 48, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Detector<T> {
    pub n_classes: usize,
    graph: ModelGraph,
    params: Vec<NodeParams<T>>,
}

/// Everything a backward pass needs from the forward pass.
pub struct Trace<T> {
    pub outputs: Vec<Tensor<T>>,
    norm_caches: Vec<Option<NormCache<T>>>,
    mode: Mode,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self, node: usize) -> &Tensor<T> {
        &self.outputs[node]
    }
}

/// Gradients of a scalar objective.
pub struct Gradients<T> {
    /// W.r.t. each node's output; `None` where no gradient flows.
    pub nodes: Vec<Option<Tensor<T>>>,
    /// Aligned with the detector's node params; `None` when not requested.
    pub params: Vec<NodeParams<T>>,
}

/// Raw dense predictions of one head level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput<T> {
    pub head: String,
    pub stride: usize,
    /// `N x (5 + C) x H x W` logits / raw offsets.
    pub raw: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub n_classes: usize,
    pub levels: Vec<LevelOutput<T>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn objectness(&self, level: usize, n: usize, y: usize, x: usize) -> T {
        ops::sigmoid(self.levels[level].raw.get(n, 0, y, x))
    }

    /// Softmax over the class logits of one cell.
    pub fn class_scores(&self, level: usize, n: usize, y: usize, x: usize) -> Vec<T> {
        let raw = &self.levels[level].raw;
        let logits: Vec<T> = (0..self.n_classes).map(|c| raw.get(n, 1 + c, y, x)).collect();
        softmax(&logits)
    }

    pub fn box_offsets(&self, level: usize, n: usize, y: usize, x: usize) -> [T; 4] {
        let raw = &self.levels[level].raw;
        let b = 1 + self.n_classes;
        [0, 1, 2, 3].map(|i| raw.get(n, b + i, y, x))
    }

    pub fn max_abs_diff(&self, other: &Prediction<T>) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.raw.max_abs_diff(&b.raw))
            .fold(0.0, f64::max)
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Activation and gradient captured at one tapped node for one sample.
#[derive(Debug, Clone)]
pub struct FeatureTap<T> {
    pub node: String,
    pub stride: usize,
    /// `C x H x W` (batch of one).
    pub activation: Tensor<T>,
    pub gradient: Tensor<T>,
}

/// Build the desk-scale detector: four strided conv stages, a residual block
/// at stride 8, a CSP-style concat block at stride 16, a two-conv neck at
/// stride 8 and dense 1x1 prediction heads at strides 8 and 16.
pub fn build_toy_detector<T: Scalar>(cfg: &ToyDetectorConfig) -> Result<Detector<T>> {
    if !(cfg.width_multiplier > 0.0) || !cfg.width_multiplier.is_finite() {
        return Err(Error::Config(format!(
            "width_multiplier must be positive, got {}",
            cfg.width_multiplier
        )));
    }
    if cfg.n_classes == 0 {
        return Err(Error::Config("n_classes must be at least 1".into()));
    }
    let w = |base: usize| ((base as f64 * cfg.width_multiplier).ceil() as usize).max(1);
    let [w0, w1, w2, w3] = BASE_WIDTHS.map(w);
    let half = w(BASE_WIDTHS[3] / 2);
    let out = head_channels(cfg.n_classes);

    let mut b = GraphBuilder::new(3);
    let stem = b.conv_block("stem", b.input(), w0, 3, 2, false);
    let s1 = b.conv_block("stage1", stem, w1, 3, 2, true);
    let s2 = b.conv_block("stage2", s1, w2, 3, 2, true);
    let r1 = b.conv_block("stage2.res1", s2, w2, 3, 1, true);
    let r2 = b.conv_block("stage2.res2", r1, w2, 3, 1, true);
    let c8 = b.add("stage2.add", &[s2, r2]);
    let s3 = b.conv_block("stage3", c8, w3, 3, 2, true);
    let a = b.conv_block("neck16.a", s3, half, 1, 1, true);
    let b1 = b.conv_block("neck16.b1", s3, half, 1, 1, true);
    let b2 = b.conv_block("neck16.b2", b1, half, 3, 1, true);
    let cat = b.concat("neck16.cat", &[a, b2]);
    let n16 = b.conv_block("neck16.out", cat, w3, 1, 1, true);
    let n8 = b.conv_block("neck8.c1", c8, w2, 3, 1, true);
    let n8 = b.conv_block("neck8.c2", n8, w2, 3, 1, true);
    b.head("head8", n8, out);
    b.head("head16", n16, out);
    let graph = b.finish()?;
    Detector::init(graph, cfg.n_classes, cfg.seed)
}

impl<T: Scalar> Detector<T> {
    /// He-normal convs, unit norms, and prediction heads biased towards
    /// "no object".
    pub fn init(graph: ModelGraph, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(graph.len());
        for n in graph.nodes() {
            let p = match n.kind {
                NodeKind::Conv { kernel, bias, .. } => {
                    let fan_in = n.in_channels * kernel * kernel;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    NodeParams::Conv {
                        weight: (0..n.out_channels * fan_in).map(|_| T::of(normal.sample(&mut rng))).collect(),
                        bias: bias.then(|| vec![T::zero(); n.out_channels]),
                    }
                }
                NodeKind::Head { kernel } => {
                    if n.out_channels != head_channels(n_classes) {
                        return Err(Error::Graph(format!(
                            "head `{}` has {} outputs, expected {}",
                            n.name,
                            n.out_channels,
                            head_channels(n_classes)
                        )));
                    }
                    let fan_in = n.in_channels * kernel * kernel;
                    let normal = Normal::new(0.0, 0.01).expect("valid std");
                    let mut bias = vec![T::zero(); n.out_channels];
                    bias[0] = T::of(-((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln());
                    NodeParams::Conv {
                        weight: (0..n.out_channels * fan_in).map(|_| T::of(normal.sample(&mut rng))).collect(),
                        bias: Some(bias),
                    }
                }
                NodeKind::Norm => NodeParams::Norm {
                    gamma: vec![T::one(); n.out_channels],
                    beta: vec![T::zero(); n.out_channels],
                    running_mean: vec![T::zero(); n.out_channels],
                    running_var: vec![T::one(); n.out_channels],
                },
                _ => NodeParams::None,
            };
            params.push(p);
        }
        Ok(Self {
            n_classes,
            graph,
            params,
        })
    }

    /// Assemble from parts, checking every tensor against the graph.
    pub fn from_parts(graph: ModelGraph, n_classes: usize, params: Vec<NodeParams<T>>) -> Result<Self> {
        let d = Self {
            n_classes,
            graph,
            params,
        };
        d.check_consistency()?;
        Ok(d)
    }

    pub fn check_consistency(&self) -> Result<()> {
        self.graph.validate()?;
        if self.params.len() != self.graph.len() {
            return Err(Error::Graph("parameter list does not match node list".into()));
        }
        for (n, p) in self.graph.nodes().iter().zip(&self.params) {
            let bad = |what: &str| Err(Error::Graph(format!("node `{}`: {what}", n.name)));
            match (n.kind, p) {
                (NodeKind::Conv { kernel, bias, .. }, NodeParams::Conv { weight, bias: b }) => {
                    if weight.len() != n.out_channels * n.in_channels * kernel * kernel {
                        return bad("weight size");
                    }
                    if bias != b.is_some() || b.as_ref().is_some_and(|b| b.len() != n.out_channels) {
                        return bad("bias size");
                    }
                }
                (NodeKind::Head { kernel }, NodeParams::Conv { weight, bias: Some(b) }) => {
                    if weight.len() != n.out_channels * n.in_channels * kernel * kernel || b.len() != n.out_channels {
                        return bad("head size");
                    }
                }
                (NodeKind::Norm, NodeParams::Norm { gamma, beta, running_mean, running_var }) => {
                    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()]
                        .iter()
                        .any(|&l| l != n.out_channels)
                    {
                        return bad("norm size");
                    }
                }
                (NodeKind::Input | NodeKind::Activation | NodeKind::Add | NodeKind::Concat, NodeParams::None) => {}
                _ => return bad("parameter kind does not match node kind"),
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn params(&self) -> &[NodeParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NodeParams<T>] {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelGraph, usize, Vec<NodeParams<T>>) {
        (self.graph, self.n_classes, self.params)
    }

    /// Learnable parameters, counted from the stored tensors.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(NodeParams::num_parameters).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            n_classes: self.n_classes,
            graph: self.graph.clone(),
            params: self.params.iter().map(NodeParams::cast).collect(),
        }
    }

    pub fn head_strides(&self) -> Vec<usize> {
        self.graph
            .heads()
            .into_iter()
            .map(|h| self.graph.node(h).cumulative_stride)
            .collect()
    }

    fn conv_geom(&self, idx: usize, input: &Tensor<T>) -> ConvGeom {
        let n = self.graph.node(idx);
        let kernel = n.kind.kernel().expect("conv-like node");
        ConvGeom::new(n.in_channels, n.out_channels, kernel, n.kind.own_stride(), input.height(), input.width())
    }

    /// Forward pass keeping every intermediate output. `edit`, when given, may
    /// modify each node's output in place right after it is computed.
    pub fn forward_traced(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        edit: Option<&dyn Fn(usize, &mut Tensor<T>)>,
    ) -> Result<Trace<T>> {
        if input.channels() != self.graph.input_channels() {
            return Err(Error::Contract(format!(
                "input has {} channels, model expects {}",
                input.channels(),
                self.graph.input_channels()
            )));
        }
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.graph.len());
        let mut norm_caches = Vec::with_capacity(self.graph.len());
        for idx in 0..self.graph.len() {
            let node = self.graph.node(idx).clone();
            let mut cache = None;
            let mut out = match node.kind {
                NodeKind::Input => input.clone(),
                NodeKind::Conv { .. } | NodeKind::Head { .. } => {
                    let x = &outputs[node.inputs[0]];
                    let g = self.conv_geom(idx, x);
                    let NodeParams::Conv { weight, bias } = &self.params[idx] else {
                        unreachable!("checked by check_consistency")
                    };
                    ops::conv_forward(x, weight, bias.as_deref(), &g)
                }
                NodeKind::Norm => {
                    let x = &outputs[node.inputs[0]];
                    let NodeParams::Norm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } = &mut self.params[idx]
                    else {
                        unreachable!("checked by check_consistency")
                    };
                    match mode {
                        Mode::Eval => ops::norm_eval(x, gamma, beta, running_mean, running_var),
                        Mode::Train => {
                            let (y, c) = ops::norm_train(x, gamma, beta, running_mean, running_var);
                            cache = Some(c);
                            y
                        }
                    }
                }
                NodeKind::Activation => ops::silu_forward(&outputs[node.inputs[0]]),
                NodeKind::Add => {
                    let mut acc = outputs[node.inputs[0]].clone();
                    for &j in &node.inputs[1..] {
                        acc.add_assign(&outputs[j]);
                    }
                    acc
                }
                NodeKind::Concat => {
                    let first = &outputs[node.inputs[0]];
                    let (n, h, w) = (first.batch(), first.height(), first.width());
                    let mut out = Tensor::zeros([n, node.out_channels, h, w]);
                    for b in 0..n {
                        let mut c0 = 0;
                        for &j in &node.inputs {
                            let src = &outputs[j];
                            for c in 0..src.channels() {
                                out.plane_mut(b, c0 + c).copy_from_slice(src.plane(b, c));
                            }
                            c0 += src.channels();
                        }
                    }
                    out
                }
            };
            if let Some(f) = edit {
                f(idx, &mut out);
            }
            outputs.push(out);
            norm_caches.push(cache);
        }
        Ok(Trace {
            outputs,
            norm_caches,
            mode,
        })
    }

    pub fn prediction_from_trace(&self, trace: &Trace<T>) -> Prediction<T> {
        Prediction {
            n_classes: self.n_classes,
            levels: self
                .graph
                .heads()
                .into_iter()
                .map(|h| LevelOutput {
                    head: self.graph.node(h).name.clone(),
                    stride: self.graph.node(h).cumulative_stride,
                    raw: trace.outputs[h].clone(),
                })
                .collect(),
        }
    }

    /// Inference forward (running norm statistics).
    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction<T>> {
        // Eval mode never writes to params; the clone keeps `&self`.
        let mut model = self.clone();
        let trace = model.forward_traced(input, Mode::Eval, None)?;
        Ok(self.prediction_from_trace(&trace))
    }

    /// Backpropagate `head_grads` (aligned with `graph.heads()`) through the
    /// trace.
    pub fn backward(&self, trace: &Trace<T>, head_grads: Vec<Tensor<T>>, want_params: bool) -> Gradients<T> {
        let n_nodes = self.graph.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n_nodes).map(|_| None).collect();
        for (h, g) in self.graph.heads().into_iter().zip(head_grads) {
            accumulate(&mut grads[h], g);
        }
        let mut pgrads: Vec<NodeParams<T>> = (0..n_nodes).map(|_| NodeParams::None).collect();

        for idx in (0..n_nodes).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = self.graph.node(idx);
            match node.kind {
                NodeKind::Input => {}
                NodeKind::Conv { .. } | NodeKind::Head { .. } => {
                    let x = &trace.outputs[node.inputs[0]];
                    let g = self.conv_geom(idx, x);
                    let NodeParams::Conv { weight, bias } = &self.params[idx] else {
                        unreachable!()
                    };
                    let cg = ops::conv_backward(x, weight, &dy, &g, bias.is_some(), want_params);
                    if let Some(dw) = cg.dweight {
                        pgrads[idx] = NodeParams::Conv {
                            weight: dw,
                            bias: cg.dbias,
                        };
                    }
                    if node.inputs[0] != 0 {
                        accumulate(&mut grads[node.inputs[0]], cg.dx);
                    }
                }
                NodeKind::Norm => {
                    let NodeParams::Norm {
                        gamma,
                        running_mean,
                        running_var,
                        ..
                    } = &self.params[idx]
                    else {
                        unreachable!()
                    };
                    let ng = match (trace.mode, &trace.norm_caches[idx]) {
                        (Mode::Train, Some(cache)) => ops::norm_train_backward(&dy, gamma, cache),
                        _ => ops::norm_eval_backward(
                            &trace.outputs[node.inputs[0]],
                            &dy,
                            gamma,
                            running_mean,
                            running_var,
                            want_params,
                        ),
                    };
                    if want_params {
                        pgrads[idx] = NodeParams::Norm {
                            gamma: ng.dgamma,
                            beta: ng.dbeta,
                            running_mean: Vec::new(),
                            running_var: Vec::new(),
                        };
                    }
                    accumulate(&mut grads[node.inputs[0]], ng.dx);
                }
                NodeKind::Activation => {
                    let dx = ops::silu_backward(&trace.outputs[node.inputs[0]], &dy);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                NodeKind::Add => {
                    for &j in &node.inputs {
                        accumulate(&mut grads[j], dy.clone());
                    }
                }
                NodeKind::Concat => {
                    let mut c0 = 0;
                    for &j in &node.inputs {
                        let width = self.graph.node(j).out_channels;
                        let keep: Vec<usize> = (c0..c0 + width).collect();
                        accumulate(&mut grads[j], dy.select_channels(&keep));
                        c0 += width;
                    }
                }
            }
            grads[idx] = Some(dy);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
