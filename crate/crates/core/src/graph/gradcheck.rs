//! Central finite-difference validation of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ForwardOptions, ModelGraph, NodeId, Op, TrainableSet};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
    /// Denominator floor of the relative error. Below it the comparison is
    /// effectively absolute (`tolerance * floor`): scale-invariant paths such
    /// as a shift or scale feeding a batch-statistics batch norm have exactly
    /// zero gradients, for which the central difference is pure rounding.
    pub floor: f64,
}

impl GradCheckConfig {
    /// 32-bit defaults: step 1e-3. The central difference of an f32 network
    /// resolves ~1e-4..5e-4 absolute, hence the floor.
    pub fn single(probes: usize) -> Self {
        GradCheckConfig { probes, step: 1e-3, seed: 0, floor: 5e-2 }
    }

    /// 64-bit shadow defaults: step 1e-5.
    pub fn double(probes: usize) -> Self {
        GradCheckConfig { probes, step: 1e-5, seed: 0, floor: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeFailure {
    pub node: NodeId,
    pub name: String,
    pub op: &'static str,
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// The probe with the largest relative error.
    pub worst: Option<ProbeFailure>,
    pub evaluated: usize,
    /// Probes discarded because the perturbation moved a ReLU6 input across
    /// a kink.
    pub skipped_kinks: usize,
}

/// Activation region of each ReLU6 input: below 0, linear, or above 6.
fn relu_regions<T: Element>(graph: &ModelGraph<T>) -> Vec<u8> {
    let six = T::of_f64(6.0);
    let mut out = Vec::new();
    for node in graph.nodes() {
        if node.op != Op::Relu6 {
            continue;
        }
        if let Some(x) = graph.output(node.inputs[0]) {
            out.extend(x.data().iter().map(|&v| {
                if v <= T::zero() {
                    0
                } else if v >= six {
                    2
                } else {
                    1
                }
            }));
        }
    }
    out
}

/// The loss of the cached forward pass, re-reduced in 64-bit from the
/// loss node's inputs. Rounding the scalar itself to `T` would put a floor
/// of `ulp(L) / 2h` under every central difference.
fn loss_f64<T: Element>(graph: &ModelGraph<T>, loss: NodeId, labels: Option<&[usize]>) -> f64 {
    let node = graph.node(loss);
    let input = |k: usize| graph.output(node.inputs[k]).expect("cached loss input");
    match (&node.op, labels) {
        (Op::CrossEntropy, Some(labels)) => {
            let z = input(0);
            let k = z.shape().sample_len();
            let total: f64 = labels
                .iter()
                .enumerate()
                .map(|(n, &label)| {
                    let row: Vec<f64> = z.sample(n).iter().map(|v| v.as_f64()).collect();
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    debug_assert!(label < k);
                    log_sum - (row[label] - max)
                })
                .sum();
            total / labels.len().max(1) as f64
        }
        (Op::Mse, _) => {
            let (a, b) = (input(0), input(1));
            let total: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum();
            total / a.len().max(1) as f64
        }
        _ => graph.loss_value(loss).expect("loss value").as_f64(),
    }
}

/// Perturbs `probes` randomly chosen trainable scalars by `±step`, compares
/// the central difference of the loss with the analytic gradient and returns
/// the worst relative error. Batch norms of trainable nodes run on batch
/// statistics without touching running statistics.
pub fn finite_difference_check<T: Element>(
    graph: &mut ModelGraph<T>,
    input: &Tensor<T>,
    labels: Option<Vec<usize>>,
    loss: NodeId,
    trainable: &TrainableSet,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut opts = ForwardOptions::train(graph, trainable)
        .frozen_stats()
        .with_targets(vec![loss]);
    opts.labels = labels;

    graph.forward(input, &opts)?;
    let base_regions = relu_regions(graph);
    let (grads, _) = graph.backward(loss, trainable)?;

    // Flat index over every trainable scalar.
    let slots: Vec<(NodeId, usize, usize)> = trainable
        .iter()
        .flat_map(|id| {
            graph
                .params(id)
                .iter()
                .enumerate()
                .map(move |(k, t)| (id, k, t.len()))
                .collect::<Vec<_>>()
        })
        .collect();
    let total: usize = slots.iter().map(|s| s.2).sum();
    let mut report = GradCheckReport::default();
    if total == 0 {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let step = T::of_f64(cfg.step);
    for _ in 0..cfg.probes {
        let mut pick = rng.gen_range(0..total);
        let &(id, slot, _) = slots
            .iter()
            .find(|s| {
                if pick < s.2 {
                    true
                } else {
                    pick -= s.2;
                    false
                }
            })
            .unwrap();
        let index = pick;
        let original = graph.params(id)[slot].data()[index];

        graph.params_mut(id)[slot].data_mut()[index] = original + step;
        graph.forward(input, &opts)?;
        let plus = loss_f64(graph, loss, opts.labels.as_deref());
        let plus_regions = relu_regions(graph);

        graph.params_mut(id)[slot].data_mut()[index] = original - step;
        graph.forward(input, &opts)?;
        let minus = loss_f64(graph, loss, opts.labels.as_deref());
        let minus_regions = relu_regions(graph);

        graph.params_mut(id)[slot].data_mut()[index] = original;
        if plus_regions != base_regions || minus_regions != base_regions {
            report.skipped_kinks += 1;
            continue;
        }

        // the perturbation actually applied, after rounding to T
        let h = ((original + step).as_f64() - (original - step).as_f64()) / 2.0;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).expect("gradient for trainable node")[slot].data()[index].as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.evaluated += 1;
        if rel >= report.max_rel_error {
            let node = graph.node(id);
            report.max_rel_error = rel;
            report.worst = Some(ProbeFailure {
                node: id,
                name: node.name.clone(),
                op: node.op.kind(),
                slot,
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    // leave the graph's cache consistent with the unperturbed parameters
    graph.forward(input, &opts)?;
    Ok(report)
}
