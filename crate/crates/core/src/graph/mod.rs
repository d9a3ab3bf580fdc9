//! Static computational graph with component tags and pruned reverse-mode
//! differentiation.
//!
//! Nodes are appended in topological order: every input id is smaller than
//! the id of the node consuming it.

mod exec;
mod gradcheck;
mod required;
mod trace;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::strided_dim;
use crate::tensor::{Element, SampleShape, Shape, Tensor};

pub use exec::{ForwardOptions, Gradients};
pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport, ProbeFailure};
pub use trace::{BackwardTrace, TraceEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Backbone,
    Encoder,
    Adapter,
    Patch,
    Classifier,
    AuxDecoder,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Backbone,
        Component::Encoder,
        Component::Adapter,
        Component::Patch,
        Component::Classifier,
        Component::AuxDecoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Backbone => "Backbone",
            Component::Encoder => "Encoder",
            Component::Adapter => "Adapter",
            Component::Patch => "Patch",
            Component::Classifier => "Classifier",
            Component::AuxDecoder => "AuxDecoder",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Input,
    Conv1x1 { out_channels: usize, stride: usize, bias: bool },
    Conv3x3 { out_channels: usize, stride: usize },
    Depthwise3x3 { stride: usize },
    /// Per-channel scale and bias (diagonal 1x1 convolution).
    ChannelScale { stride: usize },
    BatchNorm,
    Relu6,
    Add,
    Concat,
    GlobalAvgPool,
    Linear { out_features: usize, bias: bool },
    /// Mean cross-entropy of logits against the labels of the batch.
    CrossEntropy,
    /// Mean squared error between prediction (input 0) and target (input 1).
    Mse,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Depthwise3x3 { .. } => "depthwise3x3",
            Op::ChannelScale { .. } => "channel_scale",
            Op::BatchNorm => "batchnorm",
            Op::Relu6 => "relu6",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::GlobalAvgPool => "avgpool",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy => "cross_entropy",
            Op::Mse => "mse",
        }
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, Op::CrossEntropy | Op::Mse)
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add | Op::Concat | Op::Mse => 2,
            _ => 1,
        }
    }

    /// Names of the learnable tensors, in storage order.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Op::Conv1x1 { bias: true, .. } | Op::Linear { bias: true, .. } => &["weight", "bias"],
            Op::Conv1x1 { bias: false, .. }
            | Op::Linear { bias: false, .. }
            | Op::Conv3x3 { .. }
            | Op::Depthwise3x3 { .. } => &["weight"],
            Op::ChannelScale { .. } => &["scale", "bias"],
            Op::BatchNorm => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn buffer_names(&self) -> &'static [&'static str] {
        match self {
            Op::BatchNorm => &["running_mean", "running_var"],
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub component: Component,
    /// Per-sample output shape.
    pub shape: SampleShape,
}

impl GraphNode {
    pub fn has_params(&self) -> bool {
        !self.op.param_names().is_empty()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NodeState<T> {
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

/// Ids of the parameter-holding nodes to be trained. Membership is validated
/// against a graph at construction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainableSet(BTreeSet<NodeId>);

impl TrainableSet {
    pub fn empty() -> Self {
        TrainableSet(BTreeSet::new())
    }

    pub fn new<T: Element>(graph: &ModelGraph<T>, ids: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for id in ids {
            let node = graph.try_node(id)?;
            if !node.has_params() {
                return Err(Error::NotParametric(id));
            }
            set.insert(id);
        }
        Ok(TrainableSet(set))
    }

    /// Every parameter node whose component is in `components`.
    pub fn from_components<T: Element>(graph: &ModelGraph<T>, components: &[Component]) -> Self {
        TrainableSet(
            graph
                .nodes()
                .iter()
                .filter(|n| n.has_params() && components.contains(&n.component))
                .map(|n| n.id)
                .collect(),
        )
    }

    pub fn all<T: Element>(graph: &ModelGraph<T>) -> Self {
        TrainableSet(graph.nodes().iter().filter(|n| n.has_params()).map(|n| n.id).collect())
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.0.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: &TrainableSet) -> TrainableSet {
        TrainableSet(self.0.union(&other.0).copied().collect())
    }

    pub fn is_subset(&self, other: &TrainableSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

type RequiredKey = (NodeId, TrainableSet);

pub struct ModelGraph<T: Element = f32> {
    nodes: Vec<GraphNode>,
    state: Vec<NodeState<T>>,
    input: Option<NodeId>,
    cache: Option<exec::ForwardCache<T>>,
    required: HashMap<RequiredKey, Arc<BTreeSet<NodeId>>>,
}

impl<T: Element> Clone for ModelGraph<T> {
    fn clone(&self) -> Self {
        ModelGraph {
            nodes: self.nodes.clone(),
            state: self.state.clone(),
            input: self.input,
            cache: None,
            required: self.required.clone(),
        }
    }
}

impl<T: Element> Default for ModelGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for ModelGraph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelGraph")
            .field("nodes", &self.nodes.len())
            .field("input", &self.input)
            .finish()
    }
}

impl<T: Element> ModelGraph<T> {
    pub fn new() -> Self {
        ModelGraph {
            nodes: Vec::new(),
            state: Vec::new(),
            input: None,
            cache: None,
            required: HashMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, shape: SampleShape) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::Invariant("graph already has an input node".into()));
        }
        let id = self.push(name, Op::Input, vec![], Component::Backbone, shape);
        self.input = Some(id);
        Ok(id)
    }

    /// Appends a node, inferring its output shape and allocating its
    /// parameters (weights zero, batch-norm at identity).
    pub fn add(&mut self, name: impl Into<String>, op: Op, inputs: &[NodeId], component: Component) -> Result<NodeId> {
        let name = name.into();
        if matches!(op, Op::Input) {
            return Err(Error::Invariant("use ModelGraph::input for input nodes".into()));
        }
        let shape = self.infer_shape(&name, &op, inputs)?;
        Ok(self.push(&name, op, inputs.to_vec(), component, shape))
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>, component: Component, shape: SampleShape) -> NodeId {
        let id = NodeId(self.nodes.len());
        let in_shape = inputs.first().map(|&i| self.nodes[i.0].shape);
        let state = allocate_state(&op, in_shape, shape);
        self.nodes.push(GraphNode {
            id,
            name: name.to_string(),
            op,
            inputs,
            component,
            shape,
        });
        self.state.push(state);
        self.cache = None;
        self.required.clear();
        id
    }

    fn infer_shape(&self, name: &str, op: &Op, inputs: &[NodeId]) -> Result<SampleShape> {
        let fail = |detail: String| Error::InvalidSpec(format!("node `{name}`: {detail}"));
        if inputs.len() != op.arity() {
            return Err(fail(format!("{} expects {} inputs, got {}", op.kind(), op.arity(), inputs.len())));
        }
        let next = NodeId(self.nodes.len());
        for &i in inputs {
            if i >= next {
                return Err(fail(format!("input {i} is not an earlier node")));
            }
        }
        let s: Vec<SampleShape> = inputs.iter().map(|&i| self.nodes[i.0].shape).collect();
        let down = |x: SampleShape, stride: usize, c: usize| {
            SampleShape::new(c, strided_dim(x.h, stride), strided_dim(x.w, stride))
        };
        let check_stride = |stride: usize| {
            if stride == 1 || stride == 2 {
                Ok(())
            } else {
                Err(fail(format!("stride {stride} not in {{1, 2}}")))
            }
        };
        Ok(match *op {
            Op::Input => unreachable!(),
            Op::Conv1x1 { out_channels, stride, .. } | Op::Conv3x3 { out_channels, stride } => {
                check_stride(stride)?;
                down(s[0], stride, out_channels)
            }
            Op::Depthwise3x3 { stride } | Op::ChannelScale { stride } => {
                check_stride(stride)?;
                down(s[0], stride, s[0].c)
            }
            Op::BatchNorm | Op::Relu6 => s[0],
            Op::Add => {
                if s[0] != s[1] {
                    return Err(fail(format!("add of {} and {}", s[0], s[1])));
                }
                s[0]
            }
            Op::Concat => {
                if (s[0].h, s[0].w) != (s[1].h, s[1].w) {
                    return Err(fail(format!("concat of {} and {}", s[0], s[1])));
                }
                SampleShape::new(s[0].c + s[1].c, s[0].h, s[0].w)
            }
            Op::GlobalAvgPool => SampleShape::new(s[0].c, 1, 1),
            Op::Linear { out_features, .. } => SampleShape::new(out_features, 1, 1),
            Op::CrossEntropy => SampleShape::new(1, 1, 1),
            Op::Mse => {
                if s[0] != s[1] {
                    return Err(fail(format!("mse of {} and {}", s[0], s[1])));
                }
                SampleShape::new(1, 1, 1)
            }
        })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn try_node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Invariant(format!("no node {id}")))
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn input_id(&self) -> Option<NodeId> {
        self.input
    }

    pub fn input_shape(&self) -> Option<SampleShape> {
        self.input.map(|i| self.nodes[i.0].shape)
    }

    pub fn set_component(&mut self, id: NodeId, component: Component) {
        self.nodes[id.0].component = component;
    }

    /// Nodes that read the output of `id`.
    pub fn consumers(&self, id: NodeId) -> impl Iterator<Item = &GraphNode> + '_ {
        self.nodes[id.0 + 1..].iter().filter(move |n| n.inputs.contains(&id))
    }

    pub fn params(&self, id: NodeId) -> &[Tensor<T>] {
        &self.state[id.0].params
    }

    pub fn params_mut(&mut self, id: NodeId) -> &mut [Tensor<T>] {
        self.cache = None;
        &mut self.state[id.0].params
    }

    pub fn buffers(&self, id: NodeId) -> &[Tensor<T>] {
        &self.state[id.0].buffers
    }

    pub fn buffers_mut(&mut self, id: NodeId) -> &mut [Tensor<T>] {
        self.cache = None;
        &mut self.state[id.0].buffers
    }

    pub fn param_count(&self, id: NodeId) -> usize {
        self.state[id.0].params.iter().map(Tensor::len).sum()
    }

    pub fn total_params(&self) -> usize {
        (0..self.nodes.len()).map(|i| self.param_count(NodeId(i))).sum()
    }

    /// Every learnable tensor and buffer as `(node.slot, tensor)`, in node order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (node, st) in self.nodes.iter().zip(&self.state) {
            for (slot, t) in node.op.param_names().iter().zip(&st.params) {
                out.push((format!("{}.{slot}", node.name), t));
            }
            for (slot, t) in node.op.buffer_names().iter().zip(&st.buffers) {
                out.push((format!("{}.{slot}", node.name), t));
            }
        }
        out
    }

    /// Looks up a tensor by its `node.slot` name.
    pub fn tensor_mut(&mut self, full_name: &str) -> Option<&mut Tensor<T>> {
        let (node_name, slot) = full_name.rsplit_once('.')?;
        let id = self.find(node_name)?;
        let op = self.nodes[id.0].op;
        self.cache = None;
        if let Some(k) = op.param_names().iter().position(|s| *s == slot) {
            return self.state[id.0].params.get_mut(k);
        }
        let k = op.buffer_names().iter().position(|s| *s == slot)?;
        self.state[id.0].buffers.get_mut(k)
    }

    /// Random initialization of the parameters of every node selected by
    /// `filter`, visited in id order.
    ///
    /// Convolutions use a Kaiming-uniform bound `sqrt(6 / fan_in)`, encoder and
    /// decoder convolutions (which have no activation) `sqrt(3 / fan_in)`,
    /// linear layers `1 / sqrt(fan_in)` with zero bias. Batch norm resets to
    /// identity. Channel-scale adapters start at unit scale, and the batch
    /// norm right after one starts with zero gamma, so a freshly added
    /// residual adapter contributes nothing until it is trained.
    pub fn initialize<R: Rng>(&mut self, rng: &mut R, filter: impl Fn(&GraphNode) -> bool) {
        self.cache = None;
        for (node, st) in self.nodes.iter().zip(self.state.iter_mut()) {
            if !filter(node) || !node.has_params() {
                continue;
            }
            let in_shape = node.inputs.first().map(|&i| self.nodes[i.0].shape);
            *st = allocate_state(&node.op, in_shape, node.shape);
            let after_scale = node
                .inputs
                .first()
                .is_some_and(|&i| matches!(self.nodes[i.0].op, Op::ChannelScale { .. }));
            match node.op {
                Op::ChannelScale { .. } => st.params[0].data_mut().fill(T::one()),
                Op::BatchNorm if after_scale => st.params[0].data_mut().fill(T::zero()),
                _ => {}
            }
            let weight = &mut st.params[0];
            let fan_in = match node.op {
                Op::Conv1x1 { .. } | Op::Linear { .. } => weight.shape().c,
                Op::Conv3x3 { .. } => weight.shape().c * 9,
                Op::Depthwise3x3 { .. } => 9,
                _ => continue,
            };
            let bound = match (node.op, node.component) {
                (Op::Linear { .. }, _) => 1.0 / (fan_in as f64).sqrt(),
                (_, Component::Encoder | Component::AuxDecoder) => (3.0 / fan_in as f64).sqrt(),
                _ => (6.0 / fan_in as f64).sqrt(),
            };
            for v in weight.data_mut() {
                *v = T::of_f64(rng.gen_range(-bound..bound));
            }
        }
    }

    /// Fails if any edge carries data from an Adapter, Encoder, Classifier or
    /// AuxDecoder node into a Backbone or Patch node.
    pub fn check_unidirectional(&self) -> Result<()> {
        for node in &self.nodes {
            if !matches!(node.component, Component::Backbone | Component::Patch) {
                continue;
            }
            for &i in &node.inputs {
                let src = &self.nodes[i.0];
                if !matches!(src.component, Component::Backbone | Component::Patch) {
                    return Err(Error::Unidirectional { from: i, to: node.id });
                }
            }
        }
        Ok(())
    }

    /// Count of nodes by component.
    pub fn component_counts(&self) -> Vec<(Component, usize)> {
        Component::ALL
            .iter()
            .map(|&c| (c, self.nodes.iter().filter(|n| n.component == c).count()))
            .filter(|&(_, k)| k > 0)
            .collect()
    }

    /// Element-wise copy of every learnable tensor and buffer of `other`
    /// whose `node.slot` name exists here with the same shape. Returns how
    /// many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &ModelGraph<T>) -> usize {
        self.copy_matching_where(other, |_| true)
    }

    /// [`copy_matching_from`](Self::copy_matching_from) restricted to nodes of
    /// `other` accepted by `filter`.
    pub fn copy_matching_where(&mut self, other: &ModelGraph<T>, filter: impl Fn(&GraphNode) -> bool) -> usize {
        let mut copied = 0;
        let keep: BTreeSet<&str> = other.nodes.iter().filter(|n| filter(n)).map(|n| n.name.as_str()).collect();
        for (name, src) in other.named_tensors() {
            let node_name = name.rsplit_once('.').map_or(name.as_str(), |p| p.0);
            if !keep.contains(node_name) {
                continue;
            }
            if let Some(dst) = self.tensor_mut(&name) {
                if dst.shape() == src.shape() {
                    *dst = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Converts every tensor to another precision (used by the 64-bit shadow
    /// gradient checks).
    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        ModelGraph {
            nodes: self.nodes.clone(),
            state: self
                .state
                .iter()
                .map(|s| NodeState {
                    params: s.params.iter().map(Tensor::cast).collect(),
                    buffers: s.buffers.iter().map(Tensor::cast).collect(),
                })
                .collect(),
            input: self.input,
            cache: None,
            required: HashMap::new(),
        }
    }
}

fn allocate_state<T: Element>(op: &Op, in_shape: Option<SampleShape>, out: SampleShape) -> NodeState<T> {
    let c_in = in_shape.map_or(0, |s| s.c);
    let zeros = |shape: Shape| Tensor::zeros(shape);
    let vec_of = |len: usize, v: f64| Tensor::vector(vec![T::of_f64(v); len]);
    let (params, buffers) = match *op {
        Op::Conv1x1 { out_channels, bias, .. } => {
            let mut p = vec![zeros(Shape::new(out_channels, c_in, 1, 1))];
            if bias {
                p.push(vec_of(out_channels, 0.0));
            }
            (p, vec![])
        }
        Op::Conv3x3 { out_channels, .. } => (vec![zeros(Shape::new(out_channels, c_in, 3, 3))], vec![]),
        Op::Depthwise3x3 { .. } => (vec![zeros(Shape::new(c_in, 1, 3, 3))], vec![]),
        Op::ChannelScale { .. } => (vec![vec_of(c_in, 0.0), vec_of(c_in, 0.0)], vec![]),
        Op::BatchNorm => (
            vec![vec_of(out.c, 1.0), vec_of(out.c, 0.0)],
            vec![vec_of(out.c, 0.0), vec_of(out.c, 1.0)],
        ),
        Op::Linear { out_features, bias } => {
            let fan_in = in_shape.map_or(0, |s| s.len());
            let mut p = vec![zeros(Shape::new(out_features, fan_in, 1, 1))];
            if bias {
                p.push(vec_of(out_features, 0.0));
            }
            (p, vec![])
        }
        _ => (vec![], vec![]),
    };
    NodeState { params, buffers }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_inference_and_param_allocation() {
        let mut g = ModelGraph::<f32>::new();
        let x = g.input("x", SampleShape::new(3, 8, 8)).unwrap();
        let c = g
            .add("c", Op::Conv1x1 { out_channels: 5, stride: 2, bias: false }, &[x], Component::Backbone)
            .unwrap();
        let bn = g.add("bn", Op::BatchNorm, &[c], Component::Backbone).unwrap();
        let p = g.add("pool", Op::GlobalAvgPool, &[bn], Component::Backbone).unwrap();
        let l = g
            .add("fc", Op::Linear { out_features: 4, bias: true }, &[p], Component::Classifier)
            .unwrap();
        assert_eq!(g.node(c).shape, SampleShape::new(5, 4, 4));
        assert_eq!(g.param_count(c), 15);
        assert_eq!(g.param_count(bn), 10);
        assert_eq!(g.param_count(l), 24);
        assert_eq!(g.buffers(bn).len(), 2);
        assert!(g
            .add("bad", Op::Add, &[c, l], Component::Backbone)
            .is_err());
    }

    #[test]
    fn trainable_set_rejects_parameterless_nodes() {
        let mut g = ModelGraph::<f32>::new();
        let x = g.input("x", SampleShape::new(2, 1, 1)).unwrap();
        let r = g.add("r", Op::Relu6, &[x], Component::Backbone).unwrap();
        assert!(matches!(TrainableSet::new(&g, [r]), Err(Error::NotParametric(_))));
    }

    #[test]
    fn unidirectional_check_flags_feedback_edges() {
        let mut g = ModelGraph::<f32>::new();
        let x = g.input("x", SampleShape::new(2, 2, 2)).unwrap();
        let a = g.add("a", Op::Relu6, &[x], Component::Adapter).unwrap();
        assert!(g.check_unidirectional().is_ok());
        g.add("b", Op::Add, &[x, a], Component::Backbone).unwrap();
        assert!(matches!(g.check_unidirectional(), Err(Error::Unidirectional { .. })));
    }
}
