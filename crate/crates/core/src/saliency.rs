//! Channel saliency (box-reweighted positive loss gradients) and channel
//! importance (region-normalized saliency-weighted activations), averaged over
//! a sample set.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::DetectionSample;
use crate::detector::{forward_with_taps, Detector, LossWeights};
use crate::error::{Error, Result};
use crate::reweight::{build_reweight_mask, ReweightConfig, ReweightMask};
use crate::scalar::{CompensatedSum, Scalar};

/// Where the coefficient map comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Boxes with margins and decay.
    BoxAware,
    /// Coefficient 1 everywhere; the whole map is the region.
    Uniform,
}

/// Cells the normalized importance is summed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    Region,
    Full,
}

/// Population the min-max normalization runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Each channel's own cells.
    Channel,
    /// All channels of the layer together.
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub reweight: ReweightConfig,
    pub weighting: Weighting,
    pub extent: Extent,
    pub norm_scope: NormScope,
    pub loss: LossWeights,
    /// Multiplies the loss before differentiation.
    pub loss_scale: f64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            reweight: ReweightConfig::default(),
            weighting: Weighting::BoxAware,
            extent: Extent::Region,
            norm_scope: NormScope::Channel,
            loss: LossWeights::default(),
            loss_scale: 1.0,
        }
    }
}

/// `sum beta * max(0, grad)` over one channel's cells.
pub fn channel_saliency<T: Scalar>(grad: &[T], mask: &ReweightMask) -> Result<f64> {
    if grad.len() != mask.beta.len() {
        return Err(Error::Contract(format!(
            "gradient map has {} cells, mask has {}",
            grad.len(),
            mask.beta.len()
        )));
    }
    let mut acc = CompensatedSum::new();
    for (g, b) in grad.iter().zip(&mask.beta) {
        acc.add(b * g.as_f64().max(0.0));
    }
    Ok(acc.value())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelImportance {
    pub score: f64,
    /// The region had no cells.
    pub empty: bool,
}

/// Min-max range of `max(0, w * a)` over the cells selected by `region`.
fn region_range<T: Scalar>(w: f64, act: &[T], region: &[bool]) -> Option<(f64, f64)> {
    act.iter()
        .zip(region)
        .filter(|(_, &r)| r)
        .map(|(a, _)| (w * a.as_f64()).max(0.0))
        .fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

fn normalized_sum<T: Scalar>(w: f64, act: &[T], region: &[bool], range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    if !(hi > lo) {
        return 0.0;
    }
    let mut acc = CompensatedSum::new();
    for (a, _) in act.iter().zip(region).filter(|(_, &r)| r) {
        acc.add(((w * a.as_f64()).max(0.0) - lo) / (hi - lo));
    }
    acc.value()
}

/// Sum over `region` of the min-max normalized `max(0, w * a)`. Zero when the
/// region is empty or the response is constant on it.
pub fn channel_importance<T: Scalar>(w: f64, act: &[T], region: &[bool]) -> Result<ChannelImportance> {
    if act.len() != region.len() {
        return Err(Error::Contract(format!(
            "activation map has {} cells, region has {}",
            act.len(),
            region.len()
        )));
    }
    if w < 0.0 {
        return Err(Error::Contract(format!("saliency must be non-negative, got {w}")));
    }
    Ok(match region_range(w, act, region) {
        None => ChannelImportance {
            score: 0.0,
            empty: true,
        },
        Some(range) => ChannelImportance {
            score: normalized_sum(w, act, region, range),
            empty: false,
        },
    })
}

/// Importance of every channel of one `C x H x W` tap.
pub fn layer_importance<T: Scalar>(
    activation: &[T],
    gradient: &[T],
    channels: usize,
    mask: &ReweightMask,
    extent: Extent,
    scope: NormScope,
) -> Result<Vec<f64>> {
    let plane = mask.beta.len();
    if activation.len() != channels * plane || gradient.len() != channels * plane {
        return Err(Error::Contract(format!(
            "tap of {} values does not match {channels} channels of {plane} cells",
            activation.len()
        )));
    }
    let full = vec![true; plane];
    let region: &[bool] = match extent {
        Extent::Region => &mask.region,
        Extent::Full => &full,
    };
    let saliency: Vec<f64> = (0..channels)
        .map(|k| channel_saliency(&gradient[k * plane..(k + 1) * plane], mask))
        .collect::<Result<_>>()?;
    let act = |k: usize| &activation[k * plane..(k + 1) * plane];
    match scope {
        NormScope::Channel => (0..channels)
            .map(|k| channel_importance(saliency[k], act(k), region).map(|c| c.score))
            .collect(),
        NormScope::Layer => {
            let range = (0..channels)
                .filter_map(|k| region_range(saliency[k], act(k), region))
                .reduce(|(a, b), (c, d)| (a.min(c), b.max(d)));
            Ok(match range {
                None => vec![0.0; channels],
                Some(range) => (0..channels)
                    .map(|k| normalized_sum(saliency[k], act(k), region, range))
                    .collect(),
            })
        }
    }
}

/// Per-channel scores of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub scores: Vec<f64>,
}

impl ImportanceTable {
    pub fn width(&self) -> usize {
        self.scores.len()
    }
}

impl Serialize for ImportanceTable {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.scores.len()))?;
        for (i, v) in self.scores.iter().enumerate() {
            m.serialize_entry(&i.to_string(), v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ImportanceTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw: BTreeMap<String, f64> = BTreeMap::deserialize(d)?;
        let mut scores = vec![f64::NAN; raw.len()];
        for (k, v) in raw {
            let i: usize = k.parse().map_err(|_| D::Error::custom(format!("bad channel index `{k}`")))?;
            if i >= scores.len() {
                return Err(D::Error::custom(format!("channel indices must be 0..{}", scores.len())));
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(D::Error::custom(format!("channel {i}: score {v} is not finite and non-negative")));
            }
            scores[i] = v;
        }
        if scores.iter().any(|v| v.is_nan()) {
            return Err(D::Error::custom("duplicate channel index"));
        }
        Ok(ImportanceTable { scores })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMeta {
    /// `saliency`, `l1` or `random`.
    pub criterion: String,
    /// Samples that contributed.
    pub n_samples: usize,
    /// Box-free samples left out of the average.
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<ImportanceConfig>,
}

/// Tables keyed by layer id (the conv node name).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSet {
    pub meta: ImportanceMeta,
    pub tables: BTreeMap<String, ImportanceTable>,
}

impl ImportanceSet {
    pub fn get(&self, layer: &str) -> Option<&ImportanceTable> {
        self.tables.get(layer)
    }

    /// Every table's width must match the layer width in `graph`.
    pub fn check_against(&self, graph: &crate::detector::ModelGraph) -> Result<()> {
        for (layer, t) in &self.tables {
            let idx = graph.require(layer)?;
            let width = graph.node(idx).out_channels;
            if width != t.width() {
                return Err(Error::PlanMismatch(format!(
                    "table for `{layer}` has {} channels, layer has {width}",
                    t.width()
                )));
            }
        }
        Ok(())
    }
}

/// Layer id of a tap: the conv it belongs to, or the node itself.
pub fn layer_id(graph: &crate::detector::ModelGraph, tap: &str) -> Result<String> {
    let node = graph.resolve_tap(tap)?;
    Ok(match graph.producing_conv(node) {
        Some(c) => graph.node(c).name.clone(),
        None => graph.node(node).name.clone(),
    })
}

/// Coefficient map of one tap for one sample.
pub fn tap_mask(sample: &DetectionSample, layer: &str, height: usize, width: usize, stride: usize, cfg: &ImportanceConfig) -> Result<ReweightMask> {
    match cfg.weighting {
        Weighting::Uniform => Ok(ReweightMask::uniform(layer, height, width)),
        Weighting::BoxAware => build_reweight_mask(layer, &sample.boxes, height, width, stride, &cfg.reweight),
    }
}

/// Mean per-channel importance over the samples that have at least one box,
/// accumulated in sample order.
pub fn compute_importance<T: Scalar>(
    model: &Detector<T>,
    samples: &[DetectionSample],
    tap_ids: &[String],
    cfg: &ImportanceConfig,
) -> Result<ImportanceSet> {
    if samples.is_empty() {
        return Err(Error::Config("importance needs at least one sample".into()));
    }
    cfg.reweight.validate()?;
    let layers: Vec<String> = tap_ids
        .iter()
        .map(|t| layer_id(model.graph(), t))
        .collect::<Result<_>>()?;
    let mut sums: Vec<Vec<CompensatedSum>> = Vec::new();
    let (mut used, mut skipped) = (0usize, 0usize);
    for sample in samples {
        if sample.is_box_free() {
            skipped += 1;
            continue;
        }
        let pass = forward_with_taps(model, sample, tap_ids, cfg.loss, cfg.loss_scale)?;
        if sums.is_empty() {
            sums = pass
                .taps
                .iter()
                .map(|t| vec![CompensatedSum::new(); t.activation.channels()])
                .collect();
        }
        for ((tap, layer), acc) in pass.taps.iter().zip(&layers).zip(sums.iter_mut()) {
            let [_, c, h, w] = tap.activation.shape();
            let mask = tap_mask(sample, layer, h, w, tap.stride, cfg)?;
            let scores = layer_importance(
                tap.activation.data(),
                tap.gradient.data(),
                c,
                &mask,
                cfg.extent,
                cfg.norm_scope,
            )?;
            for (a, s) in acc.iter_mut().zip(scores) {
                a.add(s);
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::NoSignal(format!("all {skipped} samples are box-free")));
    }
    if skipped > 0 {
        log::warn!("{skipped} box-free samples skipped in the importance average");
    }
    let tables = layers
        .into_iter()
        .zip(sums)
        .map(|(layer, acc)| {
            let scores = acc.iter().map(|a| a.value() / used as f64).collect();
            (layer, ImportanceTable { scores })
        })
        .collect();
    Ok(ImportanceSet {
        meta: ImportanceMeta {
            criterion: "saliency".into(),
            n_samples: used,
            n_skipped: skipped,
            seed: None,
            settings: Some(*cfg),
        },
        tables,
    })
}
