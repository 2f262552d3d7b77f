use serde::{Deserialize, Serialize};

use crate::detector::{Detector, Mode, ModelGraph, NodeKind};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cost of one parameterized node. FLOPs count a multiply-accumulate as two
/// operations; norm and activation arithmetic is not counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub node: String,
    pub params: u64,
    pub flops: u64,
}

/// Totals equal the sums over `layers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub input_size: (usize, usize),
    pub layers: Vec<LayerCost>,
}

pub fn cost_report(graph: &ModelGraph, height: usize, width: usize) -> CostReport {
    let sizes = graph.spatial_sizes(height, width);
    let mut layers = Vec::new();
    for (i, n) in graph.nodes().iter().enumerate() {
        let (params, flops) = match n.kind {
            NodeKind::Conv { kernel, .. } | NodeKind::Head { kernel } => {
                let macs_per_pixel = (n.out_channels * n.in_channels * kernel * kernel) as u64;
                let bias = if n.kind.has_bias() { n.out_channels as u64 } else { 0 };
                let (h, w) = sizes[i];
                (macs_per_pixel + bias, 2 * macs_per_pixel * (h * w) as u64)
            }
            NodeKind::Norm => (2 * n.out_channels as u64, 0),
            NodeKind::Input | NodeKind::Activation | NodeKind::Add | NodeKind::Concat => continue,
        };
        layers.push(LayerCost {
            node: n.name.clone(),
            params,
            flops,
        });
    }
    CostReport {
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        input_size: (height, width),
        layers,
    }
}

pub fn count_params(graph: &ModelGraph) -> u64 {
    cost_report(graph, 1, 1).params
}

pub fn count_flops(graph: &ModelGraph, height: usize, width: usize) -> u64 {
    cost_report(graph, height, width).flops
}

/// Parameters and FLOPs measured on a model instance: parameters from the
/// stored tensors, FLOPs from filter sizes and the output maps of a real
/// forward pass.
pub fn measured_cost<T: Scalar>(model: &Detector<T>, height: usize, width: usize) -> Result<(u64, u64)> {
    let input = Tensor::zeros([1, model.graph().input_channels(), height, width]);
    let mut scratch = model.clone();
    let trace = scratch.forward_traced(&input, Mode::Eval, None)?;
    let mut flops = 0u64;
    for (i, (n, p)) in model.graph().nodes().iter().zip(model.params()).enumerate() {
        if let (NodeKind::Conv { .. } | NodeKind::Head { .. }, crate::detector::NodeParams::Conv { weight, .. }) = (n.kind, p) {
            let out = trace.output(i);
            flops += 2 * (weight.len() * out.height() * out.width()) as u64;
        }
    }
    Ok((model.num_parameters() as u64, flops))
}
