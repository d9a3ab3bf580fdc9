//! Graph generators shared by the integration suites.
#![allow(dead_code)]

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use udta::graph::{finite_difference_check, GradCheckConfig, GradCheckReport, Gradients};
use udta::{BackwardTrace, Component, ForwardOptions, ModelGraph, NodeId, Op, SampleShape, Shape, Tensor, TrainableSet};

pub type Build = fn(&mut ModelGraph<f32>, NodeId) -> udta::Result<NodeId>;

/// `x -> channel scale -> <op under test> -> pool -> linear -> CE`. The
/// channel scale in front makes its parameter gradients depend on the input
/// gradient of the op under test.
pub fn op_graph(build: Build, seed: u64) -> (ModelGraph<f32>, NodeId, Tensor<f32>, Vec<usize>) {
    let mut g = ModelGraph::new();
    let x = g.input("x", SampleShape::new(3, 6, 6)).unwrap();
    let pre = g.add("pre", Op::ChannelScale { stride: 1 }, &[x], Component::Adapter).unwrap();
    let feat = build(&mut g, pre).unwrap();
    let pool = g.add("pool", Op::GlobalAvgPool, &[feat], Component::Classifier).unwrap();
    let fc = g.add("fc", Op::Linear { out_features: 3, bias: true }, &[pool], Component::Classifier).unwrap();
    let loss = g.add("loss", Op::CrossEntropy, &[fc], Component::Classifier).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.initialize(&mut rng, |_| true);
    for id in (0..g.len()).map(NodeId) {
        match g.node(id).op {
            Op::ChannelScale { .. } => {
                for p in g.params_mut(id) {
                    for v in p.data_mut() {
                        *v = rng.gen_range(-3.0..3.0);
                    }
                }
            }
            Op::BatchNorm => {
                for p in g.params_mut(id) {
                    for v in p.data_mut() {
                        *v += rng.gen_range(0.2..0.8);
                    }
                }
                let (mean, var) = (rng.gen_range(-0.5..0.5), rng.gen_range(0.5..2.0));
                let bufs = g.buffers_mut(id);
                bufs[0].data_mut().iter_mut().for_each(|v| *v = mean);
                bufs[1].data_mut().iter_mut().for_each(|v| *v = var);
            }
            _ => {}
        }
    }
    let input = Tensor::from_fn(Shape::new(4, 3, 6, 6), |_| rng.gen_range(0.0..2.0));
    let labels = (0..4).map(|_| rng.gen_range(0..3)).collect();
    (g, loss, input, labels)
}

/// Every op kind in a small graph: (name, builder, nodes kept frozen).
pub fn op_cases() -> Vec<(&'static str, Build, &'static [&'static str])> {
    vec![
        ("conv1x1", |g, x| g.add("op", Op::Conv1x1 { out_channels: 4, stride: 1, bias: true }, &[x], Component::Backbone), &[]),
        ("conv1x1_s2", |g, x| g.add("op", Op::Conv1x1 { out_channels: 5, stride: 2, bias: false }, &[x], Component::Backbone), &[]),
        ("conv3x3", |g, x| g.add("op", Op::Conv3x3 { out_channels: 4, stride: 1 }, &[x], Component::Backbone), &[]),
        ("conv3x3_s2", |g, x| g.add("op", Op::Conv3x3 { out_channels: 4, stride: 2 }, &[x], Component::Backbone), &[]),
        ("depthwise", |g, x| g.add("op", Op::Depthwise3x3 { stride: 1 }, &[x], Component::Backbone), &[]),
        ("depthwise_s2", |g, x| g.add("op", Op::Depthwise3x3 { stride: 2 }, &[x], Component::Backbone), &[]),
        ("channel_scale_s2", |g, x| g.add("op", Op::ChannelScale { stride: 2 }, &[x], Component::Adapter), &[]),
        ("bn_train", |g, x| g.add("op", Op::BatchNorm, &[x], Component::Backbone), &[]),
        // frozen: running statistics, only the input gradient flows
        ("bn_eval", |g, x| g.add("op", Op::BatchNorm, &[x], Component::Backbone), &["op"]),
        ("relu6", |g, x| g.add("op", Op::Relu6, &[x], Component::Backbone), &[]),
        (
            "add",
            |g, x| {
                let b = g.add("branch", Op::ChannelScale { stride: 1 }, &[x], Component::Adapter)?;
                g.add("op", Op::Add, &[x, b], Component::Backbone)
            },
            &[],
        ),
        (
            "concat",
            |g, x| {
                let b = g.add("branch", Op::Conv1x1 { out_channels: 2, stride: 1, bias: true }, &[x], Component::Adapter)?;
                g.add("op", Op::Concat, &[x, b], Component::Backbone)
            },
            &[],
        ),
        (
            "linear_nobias",
            |g, x| {
                let p = g.add("p", Op::GlobalAvgPool, &[x], Component::Classifier)?;
                g.add("op", Op::Linear { out_features: 4, bias: false }, &[p], Component::Classifier)
            },
            &[],
        ),
    ]
}

/// Checks one op graph in 32-bit and in the 64-bit shadow.
pub fn op_gradcheck(build: Build, frozen: &[&str], seed: u64, probes: usize) -> (GradCheckReport, GradCheckReport) {
    let (mut g, loss, x, labels) = op_graph(build, seed);
    let ids = (0..g.len())
        .map(NodeId)
        .filter(|&id| g.node(id).has_params() && !frozen.contains(&g.node(id).name.as_str()));
    let trainable = TrainableSet::new(&g, ids).unwrap();

    let mut cfg = GradCheckConfig::single(probes);
    cfg.seed = seed;
    let r32 = finite_difference_check(&mut g, &x, Some(labels.clone()), loss, &trainable, &cfg).unwrap();

    let mut g64 = g.cast::<f64>();
    let x64 = Tensor::from_fn(x.shape(), |i| x.data()[i] as f64);
    let mut cfg = GradCheckConfig::double(probes);
    cfg.seed = seed;
    let r64 = finite_difference_check(&mut g64, &x64, Some(labels), loss, &trainable, &cfg).unwrap();
    (r32, r64)
}

pub struct RandomNet {
    pub graph: ModelGraph<f64>,
    pub loss: NodeId,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

/// Options for [`random_net`].
#[derive(Clone, Copy)]
pub struct Gen {
    pub backbone: usize,
    pub adapter: usize,
    /// Allow ops whose derivative can vanish (ReLU6 saturation, batch norm
    /// on batch statistics).
    pub kinked: bool,
}

fn shape_of(g: &ModelGraph<f64>, id: NodeId) -> SampleShape {
    g.node(id).shape
}

/// A random backbone chain with skip connections, and an adapter stream
/// that taps backbone activations through forward edges only, merged with
/// the pooled backbone feature in the classifier.
pub fn random_net(seed: u64, opts: Gen) -> RandomNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ModelGraph::<f64>::new();
    let x = g.input("x", SampleShape::new(3, 8, 8)).unwrap();
    let mut bb = vec![x];
    let mut cur = x;
    for i in 0..opts.backbone {
        let s = shape_of(&g, cur);
        let choice = rng.gen_range(0..if opts.kinked { 7 } else { 5 });
        let name = format!("bb{i}");
        let op = match choice {
            0 => Op::Conv1x1 { out_channels: rng.gen_range(2..6), stride: 1, bias: rng.gen() },
            1 => Op::Conv3x3 { out_channels: rng.gen_range(2..6), stride: if s.h > 2 { rng.gen_range(1..3) } else { 1 } },
            2 => Op::Depthwise3x3 { stride: 1 },
            3 => Op::ChannelScale { stride: 1 },
            4 => {
                // residual add with an earlier activation of the same shape
                let same: Vec<NodeId> = bb.iter().copied().filter(|&b| b != cur && shape_of(&g, b) == s).collect();
                match same.choose(&mut rng) {
                    Some(&other) => {
                        cur = g.add(name, Op::Add, &[cur, other], Component::Backbone).unwrap();
                        bb.push(cur);
                        continue;
                    }
                    None => Op::ChannelScale { stride: 1 },
                }
            }
            5 => Op::Relu6,
            _ => Op::BatchNorm,
        };
        cur = g.add(name, op, &[cur], Component::Backbone).unwrap();
        bb.push(cur);
    }
    let top = cur;

    // adapter stream: starts from a tap, then alternates own ops and merges
    let tap = *bb[1..].choose(&mut rng).unwrap();
    let width = rng.gen_range(2..5);
    let mut ad = g
        .add("enc0", Op::Conv1x1 { out_channels: width, stride: 1, bias: false }, &[tap], Component::Encoder)
        .unwrap();
    for i in 0..opts.adapter {
        let s = shape_of(&g, ad);
        let name = format!("ad{i}");
        ad = match rng.gen_range(0..if opts.kinked { 5 } else { 4 }) {
            0 => g.add(name, Op::Conv1x1 { out_channels: width, stride: 1, bias: true }, &[ad], Component::Adapter),
            1 => g.add(name, Op::Depthwise3x3 { stride: 1 }, &[ad], Component::Adapter),
            2 | 3 => {
                let taps: Vec<NodeId> = bb[1..].iter().copied().filter(|&b| shape_of(&g, b).h == s.h).collect();
                let &t = taps.choose(&mut rng).unwrap_or(&tap);
                if shape_of(&g, t).h != s.h {
                    g.add(name, Op::ChannelScale { stride: 1 }, &[ad], Component::Adapter)
                } else {
                    let e = g
                        .add(format!("enc{}", i + 1), Op::Conv1x1 { out_channels: width, stride: 1, bias: false }, &[t], Component::Encoder)
                        .unwrap();
                    if rng.gen() {
                        g.add(name, Op::Add, &[ad, e], Component::Adapter)
                    } else {
                        let c = g.add(format!("{name}.cat"), Op::Concat, &[ad, e], Component::Adapter).unwrap();
                        g.add(name, Op::Conv1x1 { out_channels: width, stride: 1, bias: true }, &[c], Component::Adapter)
                    }
                }
            }
            _ => g.add(name, Op::Relu6, &[ad], Component::Adapter),
        }
        .unwrap();
    }
    let p1 = g.add("pool.bb", Op::GlobalAvgPool, &[top], Component::Backbone).unwrap();
    let p2 = g.add("pool.ad", Op::GlobalAvgPool, &[ad], Component::Adapter).unwrap();
    let cat = g.add("cls.cat", Op::Concat, &[p1, p2], Component::Classifier).unwrap();
    let fc = g.add("cls.fc", Op::Linear { out_features: 3, bias: true }, &[cat], Component::Classifier).unwrap();
    let loss = g.add("loss", Op::CrossEntropy, &[fc], Component::Classifier).unwrap();

    g.initialize(&mut rng, |_| true);
    for id in (0..g.len()).map(NodeId) {
        if matches!(g.node(id).op, Op::ChannelScale { .. } | Op::BatchNorm) {
            for p in g.params_mut(id) {
                for v in p.data_mut() {
                    *v += rng.gen_range(0.2..0.6);
                }
            }
        }
    }
    let input = Tensor::from_fn(Shape::new(3, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
    let labels = (0..3).map(|_| rng.gen_range(0..3)).collect();
    RandomNet { graph: g, loss, input, labels }
}

pub fn param_nodes(g: &ModelGraph<f64>, pred: impl Fn(Component) -> bool) -> Vec<NodeId> {
    (0..g.len())
        .map(NodeId)
        .filter(|&id| g.node(id).has_params() && pred(g.node(id).component))
        .collect()
}

/// The ids selected by the bits of `mask`; never empty.
pub fn random_subset(ids: &[NodeId], mask: u64) -> Vec<NodeId> {
    let picked: Vec<NodeId> = ids
        .iter()
        .enumerate()
        .filter(|(i, _)| mask >> (i % 64) & 1 == 1)
        .map(|(_, &id)| id)
        .collect();
    if picked.is_empty() {
        vec![*ids.last().unwrap()]
    } else {
        picked
    }
}

pub fn step(net: &mut RandomNet, trainable: &TrainableSet) -> (Gradients<f64>, BackwardTrace) {
    let opts = ForwardOptions::train(&net.graph, trainable).with_labels(net.labels.clone());
    net.graph.forward(&net.input, &opts).unwrap();
    net.graph.backward(net.loss, trainable).unwrap()
}

/// Adapter-side training on a random unidirectional net: the trace must
/// hold no Backbone or Encoder node. Returns the offending count.
pub fn exclusion_violations(seed: u64, backbone: usize, adapter: usize, mask: u64) -> usize {
    let mut net = random_net(seed, Gen { backbone, adapter, kinked: true });
    net.graph.check_unidirectional().unwrap();
    let candidates = param_nodes(&net.graph, |c| matches!(c, Component::Adapter | Component::Classifier));
    let trainable = TrainableSet::new(&net.graph, random_subset(&candidates, mask)).unwrap();
    let (_, trace) = step(&mut net, &trainable);
    trace.count(Component::Backbone) + trace.count(Component::Encoder)
}
