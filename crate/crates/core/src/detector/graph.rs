//! Layer graph of a detector: the structural contract the pruner works on.
//!
//! Nodes are stored in topological order and refer to their inputs by index.
//! On the wire the graph is a node list with named inputs plus an explicit
//! edge list, so the JSON is readable without knowing the storage order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv { kernel: usize, stride: usize, bias: bool },
    Norm,
    Activation,
    Add,
    Concat,
    /// Dense prediction layer: a stride-1 conv with bias whose output channels
    /// are fixed by the task (objectness, classes, box offsets).
    Head { kernel: usize },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::Norm => "norm",
            NodeKind::Activation => "activation",
            NodeKind::Add => "add",
            NodeKind::Concat => "concat",
            NodeKind::Head { .. } => "head",
        }
    }

    pub fn kernel(&self) -> Option<usize> {
        match *self {
            NodeKind::Conv { kernel, .. } | NodeKind::Head { kernel } => Some(kernel),
            _ => None,
        }
    }

    pub fn own_stride(&self) -> usize {
        match *self {
            NodeKind::Conv { stride, .. } => stride,
            _ => 1,
        }
    }

    pub fn has_bias(&self) -> bool {
        matches!(self, NodeKind::Conv { bias: true, .. } | NodeKind::Head { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stride of this node's output w.r.t. the input image.
    pub cumulative_stride: usize,
    /// For convs: whether output channels may be removed.
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GraphJson", try_from = "GraphJson")]
pub struct ModelGraph {
    nodes: Vec<Node>,
}

impl ModelGraph {
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let g = Self { nodes };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Config(format!("no node named `{name}` in graph")))
    }

    pub fn input_channels(&self) -> usize {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Input)
            .map(|n| n.out_channels)
            .unwrap_or(0)
    }

    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                out[j].push(i);
            }
        }
        out
    }

    pub fn heads(&self) -> Vec<usize> {
        self.indices_of(|k| matches!(k, NodeKind::Head { .. }))
    }

    pub fn convs(&self) -> Vec<usize> {
        self.indices_of(|k| matches!(k, NodeKind::Conv { .. }))
    }

    pub fn prunable_convs(&self) -> Vec<usize> {
        self.convs()
            .into_iter()
            .filter(|&i| self.nodes[i].prunable)
            .collect()
    }

    fn indices_of(&self, pred: impl Fn(&NodeKind) -> bool) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| pred(&n.kind))
            .map(|(i, _)| i)
            .collect()
    }

    /// Output of the norm -> activation chain directly after a conv, or the
    /// conv itself when the chain is absent.
    pub fn post_activation(&self, conv: usize) -> usize {
        let consumers = self.consumers();
        let mut cur = conv;
        for want in [NodeKind::Norm, NodeKind::Activation] {
            match consumers[cur].as_slice() {
                [next] if self.nodes[*next].kind == want => cur = *next,
                _ => break,
            }
        }
        cur
    }

    /// Resolve a tap id to the node whose output is captured. Conv names map
    /// to their post-activation output; input and head nodes are rejected.
    /// A block name (`stage2`) stands for its conv (`stage2.conv`).
    pub fn resolve_tap(&self, id: &str) -> Result<usize> {
        let idx = match self.index_of(id) {
            Some(i) => i,
            None => self.require(&format!("{id}.conv")).map_err(|_| Error::Config(format!("no node named `{id}` in graph")))?,
        };
        match self.nodes[idx].kind {
            NodeKind::Conv { .. } => Ok(self.post_activation(idx)),
            NodeKind::Norm | NodeKind::Activation | NodeKind::Add | NodeKind::Concat => Ok(idx),
            NodeKind::Input | NodeKind::Head { .. } => Err(Error::Config(format!(
                "`{id}` is a {} node and carries no feature map to tap",
                self.nodes[idx].kind.name()
            ))),
        }
    }

    /// Producing conv of a feature node, following activation/norm back.
    pub fn producing_conv(&self, idx: usize) -> Option<usize> {
        let mut cur = idx;
        loop {
            match self.nodes[cur].kind {
                NodeKind::Conv { .. } => return Some(cur),
                NodeKind::Norm | NodeKind::Activation => cur = self.nodes[cur].inputs[0],
                _ => return None,
            }
        }
    }

    /// Spatial size of every node's output for a given input size.
    pub fn spatial_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let s = match n.kind {
                NodeKind::Input => (height, width),
                NodeKind::Conv { kernel, stride, .. } => {
                    let (h, w) = sizes[n.inputs[0]];
                    (conv_out(h, kernel, stride), conv_out(w, kernel, stride))
                }
                _ => sizes[n.inputs[0]],
            };
            sizes.push(s);
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(n.name.as_str(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node name `{}`", n.name)));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Graph(format!(
                    "node `{}` consumes node #{bad} that does not precede it (cycle or bad order)",
                    n.name
                )));
            }
            let ins: Vec<&Node> = n.inputs.iter().map(|&j| &self.nodes[j]).collect();
            let fail = |msg: String| Err(Error::Graph(format!("node `{}`: {msg}", n.name)));
            if n.kind.kernel() == Some(0) || n.kind.own_stride() == 0 {
                return fail("zero kernel or stride".into());
            }
            match n.kind {
                NodeKind::Input => {
                    if !ins.is_empty() {
                        return fail("input node has inputs".into());
                    }
                    if n.cumulative_stride != 1 {
                        return fail("input stride must be 1".into());
                    }
                }
                NodeKind::Conv { .. } | NodeKind::Head { .. } | NodeKind::Norm | NodeKind::Activation => {
                    if ins.len() != 1 {
                        return fail(format!("expects one input, has {}", ins.len()));
                    }
                    if ins[0].out_channels != n.in_channels {
                        return fail(format!(
                            "in_channels {} but input `{}` has {}",
                            n.in_channels, ins[0].name, ins[0].out_channels
                        ));
                    }
                    let expect = ins[0].cumulative_stride * n.kind.own_stride();
                    if n.cumulative_stride != expect {
                        return fail(format!("cumulative stride {} != {expect}", n.cumulative_stride));
                    }
                    if matches!(n.kind, NodeKind::Norm | NodeKind::Activation) && n.out_channels != n.in_channels {
                        return fail("norm/activation must preserve width".into());
                    }
                    if matches!(n.kind, NodeKind::Conv { .. })
                        && (n.cumulative_stride < 2 || !n.cumulative_stride.is_power_of_two())
                    {
                        return fail(format!(
                            "conv cumulative stride {} is not a positive power of 2",
                            n.cumulative_stride
                        ));
                    }
                }
                NodeKind::Add => {
                    if ins.len() < 2 {
                        return fail("add needs at least two inputs".into());
                    }
                    if ins.iter().any(|m| m.out_channels != n.out_channels) {
                        return fail("add inputs differ in width".into());
                    }
                    if ins.iter().any(|m| m.cumulative_stride != n.cumulative_stride) {
                        return fail("add inputs differ in stride".into());
                    }
                    if n.in_channels != n.out_channels {
                        return fail("add in/out widths differ".into());
                    }
                }
                NodeKind::Concat => {
                    if ins.len() < 2 {
                        return fail("concat needs at least two inputs".into());
                    }
                    let total: usize = ins.iter().map(|m| m.out_channels).sum();
                    if total != n.out_channels || n.in_channels != total {
                        return fail(format!("concat width {} != sum of inputs {total}", n.out_channels));
                    }
                    if ins.iter().any(|m| m.cumulative_stride != n.cumulative_stride) {
                        return fail("concat inputs differ in stride".into());
                    }
                }
            }
            if n.out_channels == 0 {
                return fail("zero output channels".into());
            }
        }
        if self.nodes.iter().filter(|n| n.kind == NodeKind::Input).count() != 1 {
            return Err(Error::Graph("graph must have exactly one input node".into()));
        }
        Ok(())
    }

    /// Copy of the graph with new channel widths (indexed like `nodes`).
    pub(crate) fn with_widths(&self, in_ch: &[usize], out_ch: &[usize]) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        for (i, n) in nodes.iter_mut().enumerate() {
            n.in_channels = in_ch[i];
            n.out_channels = out_ch[i];
        }
        ModelGraph::new(nodes)
    }
}

pub fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

/// Incremental graph construction with automatic widths and strides.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                kind: NodeKind::Input,
                inputs: vec![],
                in_channels: input_channels,
                out_channels: input_channels,
                cumulative_stride: 1,
                prunable: false,
            }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    fn push(&mut self, name: String, kind: NodeKind, inputs: Vec<usize>, out: usize, prunable: bool) -> usize {
        let first = &self.nodes[inputs[0]];
        let in_channels = match kind {
            NodeKind::Concat => inputs.iter().map(|&i| self.nodes[i].out_channels).sum(),
            _ => first.out_channels,
        };
        let cumulative_stride = first.cumulative_stride * kind.own_stride();
        self.nodes.push(Node {
            name,
            kind,
            inputs,
            in_channels,
            out_channels: out,
            cumulative_stride,
            prunable,
        });
        self.nodes.len() - 1
    }

    /// `conv -> norm -> activation`; returns the activation node.
    pub fn conv_block(&mut self, name: &str, input: usize, out: usize, kernel: usize, stride: usize, prunable: bool) -> usize {
        let c = self.push(
            format!("{name}.conv"),
            NodeKind::Conv { kernel, stride, bias: false },
            vec![input],
            out,
            prunable,
        );
        let n = self.push(format!("{name}.norm"), NodeKind::Norm, vec![c], out, false);
        self.push(format!("{name}.act"), NodeKind::Activation, vec![n], out, false)
    }

    pub fn add(&mut self, name: &str, inputs: &[usize]) -> usize {
        let w = self.nodes[inputs[0]].out_channels;
        self.push(name.to_string(), NodeKind::Add, inputs.to_vec(), w, false)
    }

    pub fn concat(&mut self, name: &str, inputs: &[usize]) -> usize {
        let w = inputs.iter().map(|&i| self.nodes[i].out_channels).sum();
        self.push(name.to_string(), NodeKind::Concat, inputs.to_vec(), w, false)
    }

    pub fn head(&mut self, name: &str, input: usize, out: usize) -> usize {
        self.push(name.to_string(), NodeKind::Head { kernel: 1 }, vec![input], out, false)
    }

    pub fn finish(self) -> Result<ModelGraph> {
        ModelGraph::new(self.nodes)
    }
}

// ---- wire format ----

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    name: String,
    #[serde(flatten)]
    kind: NodeKind,
    inputs: Vec<String>,
    in_channels: usize,
    out_channels: usize,
    cumulative_stride: usize,
    #[serde(default)]
    prunable: bool,
}

impl From<ModelGraph> for GraphJson {
    fn from(g: ModelGraph) -> Self {
        let names: Vec<String> = g.nodes.iter().map(|n| n.name.clone()).collect();
        let mut edges = Vec::new();
        let nodes = g
            .nodes
            .into_iter()
            .map(|n| {
                for &j in &n.inputs {
                    edges.push((names[j].clone(), n.name.clone()));
                }
                NodeJson {
                    inputs: n.inputs.iter().map(|&j| names[j].clone()).collect(),
                    name: n.name,
                    kind: n.kind,
                    in_channels: n.in_channels,
                    out_channels: n.out_channels,
                    cumulative_stride: n.cumulative_stride,
                    prunable: n.prunable,
                }
            })
            .collect();
        GraphJson { nodes, edges }
    }
}

impl TryFrom<GraphJson> for ModelGraph {
    type Error = Error;

    fn try_from(g: GraphJson) -> Result<Self> {
        let index: BTreeMap<&str, usize> = g
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        let mut inputs = Vec::with_capacity(g.nodes.len());
        for n in &g.nodes {
            let ids = n
                .inputs
                .iter()
                .map(|s| {
                    index
                        .get(s.as_str())
                        .copied()
                        .ok_or_else(|| Error::Graph(format!("`{}` consumes unknown node `{s}`", n.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            inputs.push(ids);
        }
        let order = topological_order(&inputs)?;
        let mut new_index = vec![0; order.len()];
        for (pos, &old) in order.iter().enumerate() {
            new_index[old] = pos;
        }
        let mut slots: Vec<Option<NodeJson>> = g.nodes.into_iter().map(Some).collect();
        let nodes = order
            .iter()
            .map(|&old| {
                let n = slots[old].take().expect("each node visited once");
                Node {
                    name: n.name,
                    kind: n.kind,
                    inputs: inputs[old].iter().map(|&j| new_index[j]).collect(),
                    in_channels: n.in_channels,
                    out_channels: n.out_channels,
                    cumulative_stride: n.cumulative_stride,
                    prunable: n.prunable,
                }
            })
            .collect();
        ModelGraph::new(nodes)
    }
}

/// Kahn's algorithm, stable w.r.t. the given order.
/// Kahn's order taking the lowest ready index first, so an already valid
/// order is returned unchanged.
fn topological_order(inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = inputs.len();
    let mut indegree: Vec<usize> = inputs.iter().map(|v| v.len()).collect();
    let mut consumers = vec![Vec::new(); n];
    for (i, ins) in inputs.iter().enumerate() {
        for &j in ins {
            consumers[j].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != n {
        return Err(Error::Graph("graph contains a cycle".into()));
    }
    Ok(order)
}
