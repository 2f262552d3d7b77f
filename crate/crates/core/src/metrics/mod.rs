//! Detection quality (AP at an IoU threshold, per-scale AP) and cost
//! accounting (parameters, FLOPs).

mod ap;
mod cost;
mod report;

use serde::{Deserialize, Serialize};

use crate::data::BBox;

pub use ap::{average_precision, evaluate, gt_count, mean_ap, EvalSummary, Interpolation, MatchConfig};
pub use cost::{cost_report, count_flops, count_params, measured_cost, CostReport, LayerCost};
pub use report::{format_table, TableRow};

/// Scored box for one sample. The class is `bbox.class_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sample_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}
