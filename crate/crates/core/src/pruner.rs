//! Structured channel pruning: coupling groups, ranked removal plans and
//! their application to a detector.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ModelGraph, NodeKind, NodeParams};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_params};
use crate::saliency::ImportanceSet;
use crate::scalar::Scalar;

/// Absorbs representation error in `rate * width` (0.29 * 100 = 28.999...).
const RATE_EPS: f64 = 1e-9;

/// Source of one output channel: the conv it comes from and its index there.
/// `None` for channels no conv owns (the image input).
type ChannelSource = Option<(usize, usize)>;

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index as root keeps group identity stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Per node, the source of every output channel.
fn channel_sources(graph: &ModelGraph) -> Vec<Vec<ChannelSource>> {
    let mut out: Vec<Vec<ChannelSource>> = Vec::with_capacity(graph.len());
    for (i, n) in graph.nodes().iter().enumerate() {
        let src = match n.kind {
            NodeKind::Input => vec![None; n.out_channels],
            NodeKind::Conv { .. } | NodeKind::Head { .. } => (0..n.out_channels).map(|c| Some((i, c))).collect(),
            NodeKind::Norm | NodeKind::Activation | NodeKind::Add => out[n.inputs[0]].clone(),
            NodeKind::Concat => n.inputs.iter().flat_map(|&j| out[j].iter().copied()).collect(),
        };
        out.push(src);
    }
    out
}

/// Convs whose output channels must be removed with identical index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningGroup {
    /// Conv node names in graph order.
    pub members: Vec<String>,
    pub width: usize,
    pub prunable: bool,
}

/// Partition all convs into coupling groups. Inputs of an add junction share
/// a group; a group touching an unprunable conv or the image input is fixed.
pub fn build_groups(graph: &ModelGraph) -> Result<Vec<PruningGroup>> {
    graph.validate().map_err(|e| Error::Contract(e.to_string()))?;
    let sources = channel_sources(graph);
    let n = graph.len();
    let mut uf = UnionFind::new(n);
    let mut fixed = vec![false; n];
    for node in graph.nodes() {
        if node.kind != NodeKind::Add {
            continue;
        }
        let first = &sources[node.inputs[0]];
        for &j in &node.inputs[1..] {
            for (a, b) in first.iter().zip(&sources[j]) {
                match (a, b) {
                    (Some((ca, oa)), Some((cb, ob))) => {
                        if oa != ob || graph.node(*ca).out_channels != graph.node(*cb).out_channels {
                            return Err(Error::Graph(format!(
                                "add `{}` joins misaligned channels of `{}` and `{}`",
                                node.name,
                                graph.node(*ca).name,
                                graph.node(*cb).name
                            )));
                        }
                        uf.union(*ca, *cb);
                    }
                    (Some((c, _)), None) | (None, Some((c, _))) => fixed[*c] = true,
                    (None, None) => {}
                }
            }
        }
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        if matches!(graph.node(i).kind, NodeKind::Conv { .. }) {
            classes.entry(uf.find(i)).or_default().push(i);
        }
    }
    Ok(classes
        .into_values()
        .map(|members| PruningGroup {
            width: graph.node(members[0]).out_channels,
            prunable: members.iter().all(|&m| graph.node(m).prunable && !fixed[m]),
            members: members.iter().map(|&m| graph.node(m).name.clone()).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub members: Vec<String>,
    pub width: usize,
    /// Ascending, unique, within `[0, width)`.
    pub remove: Vec<usize>,
    pub keep_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSnapshot {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub rate: f64,
    pub criterion: String,
    pub groups: Vec<GroupPlan>,
    pub input_size: (usize, usize),
    pub before: CostSnapshot,
    pub predicted: CostSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(|g| g.remove.is_empty())
    }

    pub fn removed_channels(&self) -> usize {
        self.groups.iter().map(|g| g.remove.len() * g.members.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Fraction of channels removed per group, in `[0, 1)`.
    pub rate: f64,
    /// Restrict pruning to groups containing one of these layers; all
    /// prunable groups when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
    pub input_size: (usize, usize),
}

/// Number of channels a group of `width` loses at `rate`; at least one kept.
pub fn removal_count(width: usize, rate: f64) -> usize {
    ((rate * width as f64 + RATE_EPS).floor() as usize).min(width.saturating_sub(1))
}

/// Indices of the `count` lowest scores, ties to the lower index; ascending.
pub fn lowest_channels(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(count).collect();
    out.sort_unstable();
    out
}

/// Rank every selected group by the sum of its members' tables and remove the
/// lowest `floor(rate * width)` channels.
pub fn make_plan(graph: &ModelGraph, importance: &ImportanceSet, cfg: &PlanConfig) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&cfg.rate) {
        return Err(Error::Config(format!("pruning rate must be in [0, 1), got {}", cfg.rate)));
    }
    importance.check_against(graph)?;
    let groups = build_groups(graph)?;
    if let Some(layers) = &cfg.layers {
        for l in layers {
            graph.require(l)?;
        }
    }
    let selected = |g: &PruningGroup| {
        g.prunable
            && cfg
                .layers
                .as_ref()
                .is_none_or(|ls| g.members.iter().any(|m| ls.contains(m)))
    };
    let mut plans = Vec::new();
    for g in groups.iter().filter(|g| selected(g)) {
        let mut score = vec![0.0; g.width];
        for m in &g.members {
            let t = importance.get(m).ok_or_else(|| Error::MissingTable(m.clone()))?;
            for (s, v) in score.iter_mut().zip(&t.scores) {
                *s += v;
            }
        }
        let remove = lowest_channels(&score, removal_count(g.width, cfg.rate));
        plans.push(GroupPlan {
            members: g.members.clone(),
            width: g.width,
            keep_count: g.width - remove.len(),
            remove,
        });
    }
    let (h, w) = cfg.input_size;
    let pruned = pruned_graph(graph, &keep_lists(graph, &plans)?)?;
    Ok(PruningPlan {
        rate: cfg.rate,
        criterion: importance.meta.criterion.clone(),
        groups: plans,
        input_size: cfg.input_size,
        before: CostSnapshot {
            params: count_params(graph),
            flops: count_flops(graph, h, w),
        },
        predicted: CostSnapshot {
            params: count_params(&pruned),
            flops: count_flops(&pruned, h, w),
        },
        fingerprint: None,
    })
}

/// Kept output channels per conv name, after validating the plan.
fn keep_lists(graph: &ModelGraph, groups: &[GroupPlan]) -> Result<BTreeMap<String, Vec<usize>>> {
    let actual = build_groups(graph)?;
    let mut seen = BTreeSet::new();
    let mut keep = BTreeMap::new();
    for g in groups {
        let bad = |msg: String| Err(Error::PlanMismatch(format!("group {:?}: {msg}", g.members)));
        let Some(real) = actual.iter().find(|a| a.members == g.members) else {
            return bad("not a coupling group of this graph".into());
        };
        if !real.prunable && !g.remove.is_empty() {
            return bad("group is not prunable".into());
        }
        if real.width != g.width {
            return bad(format!("width {} but layer has {}", g.width, real.width));
        }
        if g.remove.windows(2).any(|w| w[0] >= w[1]) || g.remove.last().is_some_and(|&c| c >= g.width) {
            return bad("removals must be ascending, unique and in range".into());
        }
        if g.remove.len() >= g.width || g.keep_count != g.width - g.remove.len() {
            return bad("must keep at least one channel and record the kept count".into());
        }
        if !seen.insert(g.members[0].clone()) {
            return bad("listed twice".into());
        }
        let removed: BTreeSet<usize> = g.remove.iter().copied().collect();
        let kept: Vec<usize> = (0..g.width).filter(|c| !removed.contains(c)).collect();
        for m in &g.members {
            keep.insert(m.clone(), kept.clone());
        }
    }
    Ok(keep)
}

/// Kept output channels of every node.
fn node_keeps(graph: &ModelGraph, conv_keep: &BTreeMap<String, Vec<usize>>) -> Vec<Vec<usize>> {
    let sources = channel_sources(graph);
    sources
        .iter()
        .map(|src| {
            src.iter()
                .enumerate()
                .filter(|(_, s)| match s {
                    Some((conv, off)) => conv_keep
                        .get(&graph.node(*conv).name)
                        .is_none_or(|k| k.binary_search(off).is_ok()),
                    None => true,
                })
                .map(|(c, _)| c)
                .collect()
        })
        .collect()
}

fn pruned_widths(graph: &ModelGraph, keeps: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let out: Vec<usize> = keeps.iter().map(Vec::len).collect();
    let inp = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| match n.kind {
            NodeKind::Input => out[i],
            NodeKind::Concat => n.inputs.iter().map(|&j| out[j]).sum(),
            _ => out[n.inputs[0]],
        })
        .collect();
    (inp, out)
}

fn pruned_graph(graph: &ModelGraph, conv_keep: &BTreeMap<String, Vec<usize>>) -> Result<ModelGraph> {
    let keeps = node_keeps(graph, conv_keep);
    let (inp, out) = pruned_widths(graph, &keeps);
    graph.with_widths(&inp, &out)
}

fn gather<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Remove the planned channels: producing filters, norm parameters and every
/// consumer's input slices. The plan is fully validated before anything is
/// built, and the input model is never modified.
pub fn apply_plan<T: Scalar>(model: &Detector<T>, plan: &PruningPlan) -> Result<Detector<T>> {
    let graph = model.graph();
    let conv_keep = keep_lists(graph, &plan.groups)?;
    let keeps = node_keeps(graph, &conv_keep);
    let (inp, out) = pruned_widths(graph, &keeps);
    let new_graph = graph.with_widths(&inp, &out)?;
    let mut params = Vec::with_capacity(graph.len());
    for (i, (node, p)) in graph.nodes().iter().zip(model.params()).enumerate() {
        let np = match (node.kind, p) {
            (NodeKind::Conv { kernel, .. } | NodeKind::Head { kernel }, NodeParams::Conv { weight, bias }) => {
                let in_keep = &keeps[node.inputs[0]];
                let kk = kernel * kernel;
                let mut w = Vec::with_capacity(keeps[i].len() * in_keep.len() * kk);
                for &o in &keeps[i] {
                    for &c in in_keep {
                        let start = (o * node.in_channels + c) * kk;
                        w.extend_from_slice(&weight[start..start + kk]);
                    }
                }
                NodeParams::Conv {
                    weight: w,
                    bias: bias.as_ref().map(|b| gather(b, &keeps[i])),
                }
            }
            (
                NodeKind::Norm,
                NodeParams::Norm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => NodeParams::Norm {
                gamma: gather(gamma, &keeps[i]),
                beta: gather(beta, &keeps[i]),
                running_mean: gather(running_mean, &keeps[i]),
                running_var: gather(running_var, &keeps[i]),
            },
            (_, other) => other.clone(),
        };
        params.push(np);
    }
    Detector::from_parts(new_graph, model.n_classes, params)
}
