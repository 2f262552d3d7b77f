//! Reference importance criteria: filter L1 norm and seeded random scores.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ModelGraph, NodeParams};
use crate::error::{Error, Result};
use crate::saliency::{layer_id, ImportanceMeta, ImportanceSet, ImportanceTable};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Saliency,
    L1,
    Random,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Saliency => "saliency",
            Criterion::L1 => "l1",
            Criterion::Random => "random",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(Criterion::Saliency),
            "l1" => Ok(Criterion::L1),
            "random" => Ok(Criterion::Random),
            other => Err(Error::Config(format!(
                "unknown criterion `{other}` (expected saliency, l1 or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub kind: Criterion,
    /// Used by `random` only.
    pub seed: u64,
}

/// Sum of absolute filter weights per output channel; `weights` is
/// `out_channels x (in_channels * k * k)`.
pub fn l1_importance<T: Scalar>(weights: &[T], out_channels: usize) -> Result<ImportanceTable> {
    if out_channels == 0 || !weights.len().is_multiple_of(out_channels) {
        return Err(Error::Contract(format!(
            "{} weights cannot be split into {out_channels} filters",
            weights.len()
        )));
    }
    let per = weights.len() / out_channels;
    let scores = weights
        .chunks(per)
        .map(|f| f.iter().map(|w| w.as_f64().abs()).sum())
        .collect();
    Ok(ImportanceTable { scores })
}

/// Uniform scores in the open interval (0, 1).
pub fn random_importance(width: usize, seed: u64) -> ImportanceTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_scores(&mut rng, width)
}

fn random_scores(rng: &mut ChaCha8Rng, width: usize) -> ImportanceTable {
    let scores = (0..width)
        .map(|_| loop {
            let v: f64 = rng.random();
            if v > 0.0 {
                break v;
            }
        })
        .collect();
    ImportanceTable { scores }
}

fn meta(criterion: Criterion, seed: Option<u64>) -> ImportanceMeta {
    ImportanceMeta {
        criterion: criterion.name().into(),
        n_samples: 0,
        n_skipped: 0,
        seed,
        settings: None,
    }
}

fn layer_ids(graph: &ModelGraph, tap_ids: &[String]) -> Result<Vec<String>> {
    tap_ids.iter().map(|t| layer_id(graph, t)).collect()
}

/// L1 tables for the convs behind `tap_ids`.
pub fn l1_importance_set<T: Scalar>(model: &Detector<T>, tap_ids: &[String]) -> Result<ImportanceSet> {
    let mut tables = BTreeMap::new();
    for layer in layer_ids(model.graph(), tap_ids)? {
        let idx = model.graph().require(&layer)?;
        let NodeParams::Conv { weight, .. } = &model.params()[idx] else {
            return Err(Error::Config(format!("`{layer}` has no filters to score")));
        };
        tables.insert(layer, l1_importance(weight, model.graph().node(idx).out_channels)?);
    }
    Ok(ImportanceSet {
        meta: meta(Criterion::L1, None),
        tables,
    })
}

/// Random tables for the layers behind `tap_ids`, drawn in layer-name order
/// from one seeded stream.
pub fn random_importance_set(graph: &ModelGraph, tap_ids: &[String], seed: u64) -> Result<ImportanceSet> {
    let mut layers = layer_ids(graph, tap_ids)?;
    layers.sort();
    layers.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables = BTreeMap::new();
    for layer in layers {
        let width = graph.node(graph.require(&layer)?).out_channels;
        tables.insert(layer, random_scores(&mut rng, width));
    }
    Ok(ImportanceSet {
        meta: meta(Criterion::Random, Some(seed)),
        tables,
    })
}
