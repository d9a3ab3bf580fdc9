use std::collections::{BTreeMap, BTreeSet};

use super::{BackwardTrace, GraphNode, ModelGraph, NodeId, Op, TraceEntry, TrainableSet};
use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormParams, BnCache, BnMode};
use crate::profile::{node_backward_flops, node_forward_flops, CostModel};
use crate::tensor::{Element, Tensor};

/// How one forward pass runs.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Labels consumed by cross-entropy nodes.
    pub labels: Option<Vec<usize>>,
    /// Batch-norm nodes that normalize with batch statistics; all others use
    /// running statistics.
    pub batch_stats: BTreeSet<NodeId>,
    /// Fold the batch statistics into the running statistics.
    pub update_running_stats: bool,
    /// Compute only these nodes and their ancestors (all nodes when `None`).
    pub targets: Option<Vec<NodeId>>,
}

impl ForwardOptions {
    /// Inference: every batch norm uses running statistics.
    pub fn eval() -> Self {
        Self::default()
    }

    /// A training step: batch norms that are trainable use batch statistics
    /// and update their running statistics; frozen ones stay in eval mode.
    pub fn train<T: Element>(graph: &ModelGraph<T>, trainable: &TrainableSet) -> Self {
        ForwardOptions {
            labels: None,
            batch_stats: trainable
                .iter()
                .filter(|&id| graph.node(id).op == Op::BatchNorm)
                .collect(),
            update_running_stats: true,
            targets: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_targets(mut self, targets: Vec<NodeId>) -> Self {
        self.targets = Some(targets);
        self
    }

    /// Keeps batch statistics but leaves running statistics untouched.
    pub fn frozen_stats(mut self) -> Self {
        self.update_running_stats = false;
        self
    }
}

pub(crate) struct ForwardCache<T> {
    batch: usize,
    acts: Vec<Option<Tensor<T>>>,
    bn: Vec<Option<BnCache<T>>>,
    labels: Option<Vec<usize>>,
}

/// Parameter gradients keyed by node, one tensor per parameter slot.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T>(pub BTreeMap<NodeId, Vec<Tensor<T>>>);

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[Tensor<T>]> {
        self.0.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Vec<Tensor<T>>)> {
        self.0.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().flatten().all(Tensor::all_finite)
    }
}

fn required_input<T>(acts: &[Option<Tensor<T>>], id: NodeId) -> &Tensor<T> {
    acts[id.0].as_ref().expect("input computed before consumer")
}

impl<T: Element> ModelGraph<T> {
    /// Runs the graph on `input`, caching every computed activation for a
    /// later [`backward`](Self::backward).
    pub fn forward(&mut self, input: &Tensor<T>, opts: &ForwardOptions) -> Result<()> {
        let input_id = self
            .input
            .ok_or_else(|| Error::Invariant("graph has no input node".into()))?;
        let declared = self.nodes[input_id.0].shape;
        if input.shape().sample() != declared {
            return Err(Error::dim(
                "forward",
                format!("input {} does not match declared {declared}", input.shape()),
            )
            .at_node(input_id, &self.nodes[input_id.0].name));
        }
        let batch = input.shape().n;
        let n = self.nodes.len();

        let mut needed = vec![opts.targets.is_none(); n];
        if let Some(targets) = &opts.targets {
            for t in targets {
                self.try_node(*t)?;
                needed[t.0] = true;
            }
            for id in (0..n).rev() {
                if needed[id] {
                    for &i in &self.nodes[id].inputs {
                        needed[i.0] = true;
                    }
                }
            }
        }

        let mut acts: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut bn: Vec<Option<BnCache<T>>> = (0..n).map(|_| None).collect();
        acts[input_id.0] = Some(input.clone());
        for id in 0..n {
            if !needed[id] || id == input_id.0 {
                continue;
            }
            let node = &self.nodes[id];
            let (out, cache) = self
                .eval_node(node, &acts, opts)
                .map_err(|e| e.at_node(node.id, &node.name))?;
            let expected = if node.op.is_loss() {
                node.shape.batched(1)
            } else {
                node.shape.batched(batch)
            };
            if out.shape() != expected {
                return Err(Error::dim(
                    "forward",
                    format!("produced {} but declared {}", out.shape(), expected),
                )
                .at_node(node.id, &node.name));
            }
            if let Some(cache) = &cache {
                if opts.update_running_stats && cache.mode == BnMode::Train {
                    let count = batch * node.shape.h * node.shape.w;
                    let st = &mut self.state[id];
                    let (rm, rv) = st.buffers.split_at_mut(1);
                    kernels::update_running_stats(
                        rm[0].data_mut(),
                        rv[0].data_mut(),
                        cache,
                        count,
                        T::of_f64(kernels::BN_MOMENTUM),
                    );
                }
            }
            acts[id] = Some(out);
            bn[id] = cache;
        }
        self.cache = Some(ForwardCache {
            batch,
            acts,
            bn,
            labels: opts.labels.clone(),
        });
        Ok(())
    }

    fn eval_node(
        &self,
        node: &GraphNode,
        acts: &[Option<Tensor<T>>],
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let x = || required_input(acts, node.inputs[0]);
        let p = &self.state[node.id.0].params;
        let out = match node.op {
            Op::Input => unreachable!("input handled by caller"),
            Op::Conv1x1 { stride, bias, .. } => {
                kernels::conv1x1_forward(x(), &p[0], bias.then(|| &p[1]), stride)?
            }
            Op::Conv3x3 { stride, .. } => kernels::conv3x3_forward(x(), &p[0], stride)?,
            Op::Depthwise3x3 { stride } => kernels::depthwise3x3_forward(x(), &p[0], stride)?,
            Op::ChannelScale { stride } => kernels::channel_scale_forward(x(), &p[0], &p[1], stride)?,
            Op::BatchNorm => {
                let b = &self.state[node.id.0].buffers;
                let params = BatchNormParams {
                    gamma: p[0].data(),
                    beta: p[1].data(),
                    running_mean: b[0].data(),
                    running_var: b[1].data(),
                    epsilon: T::of_f64(kernels::BN_EPSILON),
                };
                let mode = if opts.batch_stats.contains(&node.id) {
                    BnMode::Train
                } else {
                    BnMode::Eval
                };
                let (out, cache) = kernels::batchnorm_forward(x(), &params, mode)?;
                return Ok((out, Some(cache)));
            }
            Op::Relu6 => kernels::relu6(x()),
            Op::Add => kernels::add(x(), required_input(acts, node.inputs[1]))?,
            Op::Concat => kernels::concat_channels(x(), required_input(acts, node.inputs[1]))?,
            Op::GlobalAvgPool => kernels::global_avgpool(x())?,
            Op::Linear { bias, .. } => kernels::linear_forward(x(), &p[0], bias.then(|| &p[1]))?,
            Op::CrossEntropy => {
                let labels = opts
                    .labels
                    .as_deref()
                    .ok_or_else(|| Error::Config("cross-entropy node needs labels".into()))?;
                Tensor::scalar(kernels::cross_entropy_loss(x(), labels)?.0)
            }
            Op::Mse => Tensor::scalar(kernels::mse_loss(x(), required_input(acts, node.inputs[1]))?.0),
        };
        Ok((out, None))
    }

    /// Cached activation of `id` from the last forward pass.
    pub fn output(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.cache.as_ref()?.acts.get(id.0)?.as_ref()
    }

    /// Scalar value of a loss node from the last forward pass.
    pub fn loss_value(&self, id: NodeId) -> Option<T> {
        self.output(id).map(|t| t.data()[0])
    }

    pub fn has_forward(&self) -> bool {
        self.cache.is_some()
    }

    /// Reverse-mode pass from `loss`, computing gradients for exactly the
    /// trainable parameters. Only nodes in the required set do any work; the
    /// returned trace lists them with their backward cost at the actual
    /// batch size.
    pub fn backward(&mut self, loss: NodeId, trainable: &TrainableSet) -> Result<(Gradients<T>, BackwardTrace)> {
        let batch = self.cache.as_ref().ok_or(Error::NoForward)?.batch as u64;
        self.backward_with_cost(loss, trainable, &CostModel::per_batch(batch))
    }

    pub fn backward_with_cost(
        &mut self,
        loss: NodeId,
        trainable: &TrainableSet,
        cost: &CostModel,
    ) -> Result<(Gradients<T>, BackwardTrace)> {
        if self.cache.is_none() {
            return Err(Error::NoForward);
        }
        let required = self.required_set(loss, trainable)?;
        self.run_backward(loss, trainable, &required, None, cost)
    }

    /// Backward pass with `skip` removed from the required set, as if its
    /// output gradient were zero. Used to check that every node of the
    /// required set contributes to some parameter gradient.
    pub fn backward_ablated(&mut self, loss: NodeId, trainable: &TrainableSet, skip: NodeId) -> Result<Gradients<T>> {
        let batch = self.cache.as_ref().ok_or(Error::NoForward)?.batch as u64;
        let required = self.required_set(loss, trainable)?;
        let (grads, _) = self.run_backward(loss, trainable, &required, Some(skip), &CostModel::per_batch(batch))?;
        Ok(grads)
    }

    fn run_backward(
        &self,
        loss: NodeId,
        trainable: &TrainableSet,
        required: &BTreeSet<NodeId>,
        skip: Option<NodeId>,
        cost: &CostModel,
    ) -> Result<(Gradients<T>, BackwardTrace)> {
        let cache = self.cache.as_ref().ok_or(Error::NoForward)?;
        if cache.acts[loss.0].is_none() {
            return Err(Error::Invariant(format!("loss node {loss} was not computed by the last forward")));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut param_grads = BTreeMap::new();
        let mut trace = BackwardTrace::default();
        if required.is_empty() {
            return Ok((Gradients(param_grads), trace));
        }
        grads[loss.0] = Some(Tensor::full(
            cache.acts[loss.0].as_ref().unwrap().shape(),
            T::one(),
        ));

        for &id in required.iter().rev() {
            if skip == Some(id) {
                continue;
            }
            let node = &self.nodes[id.0];
            let g_out = match grads[id.0].take() {
                Some(g) => g,
                // everything above was ablated away
                None if skip.is_some() => continue,
                None => return Err(Error::Invariant(format!("no upstream gradient reached {id}"))),
            };
            let need_params = trainable.contains(id);
            let need: Vec<bool> = node.inputs.iter().map(|i| required.contains(i)).collect();
            let (input_grads, pgrads) = self
                .node_backward(node, cache, &g_out, &need, need_params)
                .map_err(|e| e.at_node(node.id, &node.name))?;
            for (k, gi) in input_grads.into_iter().enumerate() {
                let Some(gi) = gi else { continue };
                let slot = &mut grads[node.inputs[k].0];
                match slot {
                    Some(acc) => acc.add_assign(&gi),
                    None => *slot = Some(gi),
                }
            }
            if need_params {
                param_grads.insert(id, pgrads);
            }
            let fwd = node_forward_flops(self, id, cost.mac_cost);
            trace.push(TraceEntry {
                id,
                component: node.component,
                flops: node_backward_flops(fwd, need_params, cost.backward) * cost.batch,
            });
        }
        Ok((Gradients(param_grads), trace))
    }

    #[allow(clippy::type_complexity)]
    fn node_backward(
        &self,
        node: &GraphNode,
        cache: &ForwardCache<T>,
        g: &Tensor<T>,
        need: &[bool],
        need_params: bool,
    ) -> Result<(Vec<Option<Tensor<T>>>, Vec<Tensor<T>>)> {
        let act = |k: usize| required_input(&cache.acts, node.inputs[k]);
        let p = &self.state[node.id.0].params;
        let need_in = need.first().copied().unwrap_or(false);
        let collect = |weight: Option<Tensor<T>>, bias: Option<Tensor<T>>| {
            weight.into_iter().chain(bias).collect::<Vec<_>>()
        };
        Ok(match node.op {
            Op::Input => (vec![], vec![]),
            Op::Conv1x1 { stride, bias, .. } => {
                let r = kernels::conv1x1_backward(act(0), &p[0], bias, g, stride, need_in, need_params)?;
                (vec![r.input], collect(r.weight, r.bias))
            }
            Op::Conv3x3 { stride, .. } => {
                let r = kernels::conv3x3_backward(act(0), &p[0], g, stride, need_in, need_params)?;
                (vec![r.input], collect(r.weight, None))
            }
            Op::Depthwise3x3 { stride } => {
                let r = kernels::depthwise3x3_backward(act(0), &p[0], g, stride, need_in, need_params)?;
                (vec![r.input], collect(r.weight, None))
            }
            Op::ChannelScale { stride } => {
                let r = kernels::channel_scale_backward(act(0), &p[0], g, stride, need_in, need_params)?;
                (vec![r.input], collect(r.weight, r.bias))
            }
            Op::BatchNorm => {
                let bn = cache.bn[node.id.0].as_ref().expect("batch-norm cache");
                let r = kernels::batchnorm_backward(g, bn, p[0].data(), need_in, need_params)?;
                (vec![r.input], collect(r.gamma, r.beta))
            }
            Op::Relu6 => (vec![need_in.then(|| kernels::relu6_backward(act(0), g))], vec![]),
            Op::Add => (
                need.iter().map(|&nd| nd.then(|| g.clone())).collect(),
                vec![],
            ),
            Op::Concat => {
                let (ga, gb) = kernels::concat_channels_backward(act(0).shape().c, g);
                (vec![need[0].then_some(ga), need[1].then_some(gb)], vec![])
            }
            Op::GlobalAvgPool => (
                vec![need_in.then(|| kernels::global_avgpool_backward(act(0).shape(), g))],
                vec![],
            ),
            Op::Linear { bias, .. } => {
                let r = kernels::linear_backward(act(0), &p[0], bias, g, need_in, need_params)?;
                (vec![r.input], collect(r.weight, r.bias))
            }
            Op::CrossEntropy => {
                let labels = cache.labels.as_deref().ok_or(Error::NoForward)?;
                let (_, gl) = kernels::cross_entropy_loss(act(0), labels)?;
                let seed = g.data()[0];
                (vec![need_in.then(|| gl.map(|v| v * seed))], vec![])
            }
            Op::Mse => {
                let (_, gx, gy) = kernels::mse_loss(act(0), act(1))?;
                let seed = g.data()[0];
                (
                    vec![
                        need[0].then(|| gx.map(|v| v * seed)),
                        need[1].then(|| gy.map(|v| v * seed)),
                    ],
                    vec![],
                )
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Component;
    use crate::tensor::{SampleShape, Shape};

    #[test]
    fn identity_conv_forward() {
        let mut g = ModelGraph::<f32>::new();
        let x = g.input("x", SampleShape::new(3, 2, 2)).unwrap();
        let c = g
            .add("c", Op::Conv1x1 { out_channels: 3, stride: 1, bias: false }, &[x], Component::Backbone)
            .unwrap();
        for o in 0..3 {
            g.params_mut(c)[0].data_mut()[o * 3 + o] = 1.0;
        }
        let input = Tensor::from_fn(Shape::new(2, 3, 2, 2), |i| i as f32 * 0.5);
        g.forward(&input, &ForwardOptions::eval()).unwrap();
        assert_eq!(g.output(c).unwrap(), &input);
    }

    #[test]
    fn backward_requires_forward() {
        let mut g = ModelGraph::<f32>::new();
        let x = g.input("x", SampleShape::new(2, 1, 1)).unwrap();
        let l = g
            .add("l", Op::Linear { out_features: 1, bias: true }, &[x], Component::Classifier)
            .unwrap();
        let t = TrainableSet::new(&g, [l]).unwrap();
        assert!(matches!(g.backward(l, &t), Err(Error::NoForward)));
    }

    #[test]
    fn forward_shape_error_names_node() {
        let mut g = ModelGraph::<f32>::new();
        g.input("image", SampleShape::new(3, 4, 4)).unwrap();
        let bad = Tensor::zeros(Shape::new(1, 3, 5, 4));
        let err = g.forward(&bad, &ForwardOptions::eval()).unwrap_err();
        assert!(err.to_string().contains("image"), "{err}");
    }

    #[test]
    fn linear_regression_gradient() {
        // L = mean((W x - y)^2); dL/dW = 2 (W x - y) x^T / m
        let mut g = ModelGraph::<f64>::new();
        let x = g.input("x", SampleShape::new(3, 1, 1)).unwrap();
        let y = g.add("y_copy", Op::GlobalAvgPool, &[x], Component::Backbone).unwrap();
        let lin = g
            .add("w", Op::Linear { out_features: 3, bias: false }, &[x], Component::Classifier)
            .unwrap();
        let loss = g.add("mse", Op::Mse, &[lin, y], Component::Classifier).unwrap();
        let w: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.1).collect();
        g.params_mut(lin)[0].data_mut().copy_from_slice(&w);
        let input = Tensor::from_vec(Shape::new(2, 3, 1, 1), vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        g.forward(&input, &ForwardOptions::eval()).unwrap();
        let t = TrainableSet::new(&g, [lin]).unwrap();
        let (grads, trace) = g.backward(loss, &t).unwrap();
        let gw = &grads.get(lin).unwrap()[0];
        let m = 6.0; // elements averaged by the loss
        for o in 0..3 {
            for i in 0..3 {
                let mut expect = 0.0;
                for n in 0..2 {
                    let xs = &input.data()[n * 3..n * 3 + 3];
                    let pred: f64 = (0..3).map(|j| w[o * 3 + j] * xs[j]).sum();
                    expect += 2.0 * (pred - xs[o]) * xs[i] / m;
                }
                assert!((gw.data()[o * 3 + i] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(trace.visited_ids().into_iter().collect::<Vec<_>>(), vec![lin, loss]);
        assert!(!trace.contains(y));
    }
}
