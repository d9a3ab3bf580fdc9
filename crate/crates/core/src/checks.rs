//! Ready-made gradient checks on desk-scale networks and a kink-free toy
//! graph, shared by the command-line tool and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_network, Config, ModelSpec};
use crate::error::Result;
use crate::graph::{finite_difference_check, Component, GradCheckConfig, GradCheckReport, ModelGraph, NodeId, Op, TrainableSet};
use crate::tensor::{Element, SampleShape, Shape, Tensor};

/// Largest accepted relative error in 32-bit arithmetic.
pub const F32_TOLERANCE: f64 = 1e-2;
/// Largest accepted relative error of the 64-bit shadow on kink-free ops.
pub const F64_TOLERANCE: f64 = 1e-6;
/// Batch for 32-bit checks of whole desk networks. Rounding of the logits
/// averages out over the batch; at 4 samples it alone is ~1e-4 absolute,
/// the size of the smallest gradients in the deepest blocks.
pub const DESK_BATCH: usize = 16;

fn random_batch<T: Element>(rng: &mut ChaCha8Rng, shape: Shape, classes: usize) -> (Tensor<T>, Vec<usize>) {
    let x = Tensor::from_fn(shape, |_| T::of_f64(rng.gen_range(0.0..1.0)));
    let labels = (0..shape.n).map(|_| rng.gen_range(0..classes)).collect();
    (x, labels)
}

/// Gradient check of the desk-scale network for `config`.
///
/// With `all_params` every parameter of the graph is probed (so every op
/// kind is differentiated through); otherwise only the configuration's own
/// trainable set.
pub fn desk_gradcheck<T: Element>(
    config: Config,
    all_params: bool,
    cfg: &GradCheckConfig,
    batch: usize,
) -> Result<GradCheckReport> {
    let spec = ModelSpec::desk();
    let mut net = build_network::<T>(&spec, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.graph.initialize(&mut rng, |_| true);
    // move batch-norm affine parameters off their identity state so their
    // gradients are generic
    for id in (0..net.graph.len()).map(NodeId) {
        if net.graph.node(id).op == Op::BatchNorm {
            for p in net.graph.params_mut(id) {
                for v in p.data_mut() {
                    *v = *v + T::of_f64(rng.gen_range(0.1..0.5));
                }
            }
        }
    }
    let trainable = if all_params {
        TrainableSet::all(&net.graph)
    } else {
        net.trainable.clone()
    };
    let r = spec.input_resolution;
    let (x, labels) = random_batch::<T>(&mut rng, Shape::new(batch, spec.input_channels, r, r), spec.classes);
    finite_difference_check(&mut net.graph, &x, Some(labels), net.loss, &trainable, cfg)
}

/// A small graph of every op without kinks: pointwise, dense and depthwise
/// convolutions, channel scale, batch norm, addition, pooling,
/// concatenation, linear and cross-entropy.
pub fn linear_toy<T: Element>() -> Result<(ModelGraph<T>, NodeId)> {
    let mut g = ModelGraph::new();
    let x = g.input("x", SampleShape::new(3, 6, 6))?;
    let a = g.add("c3", Op::Conv3x3 { out_channels: 4, stride: 2 }, &[x], Component::Backbone)?;
    let b = g.add("bn", Op::BatchNorm, &[a], Component::Backbone)?;
    let c = g.add("dw", Op::Depthwise3x3 { stride: 1 }, &[b], Component::Backbone)?;
    let d = g.add("cs", Op::ChannelScale { stride: 1 }, &[b], Component::Adapter)?;
    let e = g.add("sum", Op::Add, &[c, d], Component::Backbone)?;
    let f = g.add("pw", Op::Conv1x1 { out_channels: 5, stride: 1, bias: true }, &[e], Component::Backbone)?;
    let p1 = g.add("pool1", Op::GlobalAvgPool, &[f], Component::Backbone)?;
    let h = g.add("pw2", Op::Conv1x1 { out_channels: 2, stride: 2, bias: false }, &[b], Component::Encoder)?;
    let p2 = g.add("pool2", Op::GlobalAvgPool, &[h], Component::Encoder)?;
    let cat = g.add("cat", Op::Concat, &[p1, p2], Component::Classifier)?;
    let fc = g.add("fc", Op::Linear { out_features: 3, bias: true }, &[cat], Component::Classifier)?;
    let loss = g.add("loss", Op::CrossEntropy, &[fc], Component::Classifier)?;
    Ok((g, loss))
}

/// Gradient check of [`linear_toy`] with every parameter trainable.
pub fn linear_toy_gradcheck<T: Element>(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut g, loss) = linear_toy::<T>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    g.initialize(&mut rng, |_| true);
    for id in (0..g.len()).map(NodeId) {
        if matches!(g.node(id).op, Op::BatchNorm | Op::ChannelScale { .. }) {
            for p in g.params_mut(id) {
                for v in p.data_mut() {
                    *v = T::of_f64(rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    let trainable = TrainableSet::all(&g);
    let (x, labels) = random_batch::<T>(&mut rng, Shape::new(4, 3, 6, 6), 3);
    finite_difference_check(&mut g, &x, Some(labels), loss, &trainable, cfg)
}
