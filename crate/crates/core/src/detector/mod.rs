//! Toy single-stage anchor-free detector: graph description, numeric kernels,
//! forward/backward engine, target assignment and detection loss.

mod decode;
mod graph;
mod loss;
mod model;
pub mod ops;

pub use decode::{decode, nms, DecodeConfig};
pub use graph::{conv_out, GraphBuilder, ModelGraph, Node, NodeKind};
pub use loss::{
    assign_targets, detection_loss, level_for_box, smooth_l1, CellTarget, LevelGeometry, LossBreakdown, LossWeights,
    Targets, SIZE_PER_STRIDE,
};
pub use model::{
    build_toy_detector, head_channels, softmax, Detector, FeatureTap, Gradients, LevelOutput, Mode, NodeParams,
    Prediction, ToyDetectorConfig, Trace, BASE_WIDTHS,
};

use crate::data::DetectionSample;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of one forward + backward pass of the detection loss on one sample.
#[derive(Debug, Clone)]
pub struct TappedPass<T> {
    pub prediction: Prediction<T>,
    pub taps: Vec<FeatureTap<T>>,
    pub loss: LossBreakdown,
}

/// Default tap set: the post-activation output of every prunable conv.
pub fn default_taps(graph: &ModelGraph) -> Vec<String> {
    graph
        .prunable_convs()
        .into_iter()
        .map(|c| graph.node(c).name.clone())
        .collect()
}

/// Inference-mode forward on one sample, then one backward pass of the
/// detection loss capturing activation and gradient at each tap. `loss_scale`
/// multiplies the loss before differentiation.
pub fn forward_with_taps<T: Scalar>(
    model: &Detector<T>,
    sample: &DetectionSample,
    tap_ids: &[String],
    weights: LossWeights,
    loss_scale: f64,
) -> Result<TappedPass<T>> {
    let nodes: Vec<usize> = tap_ids
        .iter()
        .map(|id| model.graph().resolve_tap(id))
        .collect::<Result<_>>()?;
    let input: Tensor<T> = sample.image.cast();
    let mut scratch = model.clone();
    let trace = scratch.forward_traced(&input, Mode::Eval, None)?;
    let prediction = model.prediction_from_trace(&trace);
    if nodes.is_empty() {
        let targets = assign_targets(&sample.boxes, &LevelGeometry::of_prediction(&prediction));
        let (loss, _) = detection_loss(&prediction, &[targets], weights)?;
        return Ok(TappedPass {
            prediction,
            taps: Vec::new(),
            loss,
        });
    }
    let targets = assign_targets(&sample.boxes, &LevelGeometry::of_prediction(&prediction));
    let (loss, mut head_grads) = detection_loss(&prediction, &[targets], weights)?;
    if loss_scale != 1.0 {
        for g in &mut head_grads {
            g.scale(T::of(loss_scale));
        }
    }
    let grads = model.backward(&trace, head_grads, false);
    let taps = tap_ids
        .iter()
        .zip(nodes)
        .map(|(id, node)| {
            let activation = trace.output(node).clone();
            let gradient = grads.nodes[node]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(activation.shape()));
            FeatureTap {
                node: id.clone(),
                stride: model.graph().node(node).cumulative_stride,
                activation,
                gradient,
            }
        })
        .collect();
    Ok(TappedPass {
        prediction,
        taps,
        loss,
    })
}
