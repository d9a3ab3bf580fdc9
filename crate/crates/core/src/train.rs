//! Pretraining, autoencoder training and domain adaptation with Adam and
//! component-based freezing.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{AutoencoderNetwork, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BackwardTrace, Component, ForwardOptions, Gradients, ModelGraph, NodeId, TrainableSet};
use crate::kernels::argmax_rows;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    AeTrain,
    Adapt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::AeTrain => "ae_train",
            Stage::Adapt => "adapt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub trainable: Vec<Component>,
    pub joint_encoder: bool,
}

impl TrainConfig {
    fn base(stage: Stage, lr: f64, loss: LossKind, trainable: Vec<Component>) -> Self {
        TrainConfig {
            stage,
            epochs: 30,
            lr,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss,
            seed: 0,
            trainable,
            joint_encoder: false,
        }
    }

    pub fn pretrain() -> Self {
        Self::base(
            Stage::Pretrain,
            0.01,
            LossKind::CrossEntropy,
            vec![Component::Backbone, Component::Classifier],
        )
    }

    pub fn autoencoder() -> Self {
        Self::base(
            Stage::AeTrain,
            0.001,
            LossKind::Mse,
            vec![Component::Encoder, Component::AuxDecoder],
        )
    }

    /// Adaptation of the thin adapters and classifier; with `joint_encoder`
    /// the encoders train as well.
    pub fn adapt(joint_encoder: bool) -> Self {
        let mut trainable = vec![Component::Adapter, Component::Classifier];
        if joint_encoder {
            trainable.push(Component::Encoder);
        }
        TrainConfig {
            joint_encoder,
            ..Self::base(Stage::Adapt, 0.001, LossKind::CrossEntropy, trainable)
        }
    }

    /// Adaptation config for a baseline with the given trainable components.
    pub fn baseline(trainable: &[Component]) -> Self {
        Self::base(Stage::Adapt, 0.001, LossKind::CrossEntropy, trainable.to_vec())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        // a zero rate is allowed: it turns a run into a pure evaluation
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("Adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return fail(format!("Adam epsilon must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        let expected_loss = match self.stage {
            Stage::AeTrain => LossKind::Mse,
            _ => LossKind::CrossEntropy,
        };
        if self.loss != expected_loss {
            return fail(format!("stage {} needs loss {:?}", self.stage.as_str(), expected_loss));
        }
        Ok(())
    }

    fn component_set(&self) -> BTreeSet<Component> {
        self.trainable.iter().copied().collect()
    }
}

/// Per-parameter Adam moments plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Element = f32> {
    pub moments: BTreeMap<NodeId, Vec<(Tensor<T>, Tensor<T>)>>,
    pub step: u64,
}

/// One bias-corrected Adam update of a single tensor.
pub fn adam_update<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(Error::dim(
            "adam",
            format!("param {} grad {} moments {} / {}", param.shape(), grad.shape(), m.shape(), v.shape()),
        ));
    }
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let one = T::one();
    let c1 = T::of_f64(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of_f64(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::of_f64(cfg.lr);
    let eps = T::of_f64(cfg.eps);
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one Adam step to every parameter that has a gradient.
pub fn adam_step<T: Element>(
    graph: &mut ModelGraph<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    for (id, gs) in grads.iter() {
        let params = graph.params_mut(id);
        if params.len() != gs.len() {
            return Err(Error::dim(
                "adam",
                format!("node {id}: {} parameters but {} gradients", params.len(), gs.len()),
            ));
        }
        let moments = state
            .moments
            .entry(id)
            .or_insert_with(|| gs.iter().map(|g| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()))).collect());
        for ((p, g), (m, v)) in params.iter_mut().zip(gs).zip(moments.iter_mut()) {
            adam_update(p, g, m, v, state.step, cfg)?;
        }
    }
    Ok(())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub top1: Option<f64>,
    pub backbone_backward_flops: u64,
    pub wall_ms: u64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Aggregate of every backward trace of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub steps: u64,
    pub visited_union: BTreeSet<NodeId>,
    pub backbone_nodes: u64,
    pub encoder_nodes: u64,
    pub backbone_backward_flops: u64,
    pub total_backward_flops: u64,
    /// Steps whose trace held at least one Backbone node.
    pub steps_with_backbone: u64,
}

impl TraceStats {
    fn add(&mut self, t: &BackwardTrace) {
        self.steps += 1;
        self.visited_union.extend(t.visited.iter().map(|e| e.id));
        let bb = t.count(Component::Backbone) as u64;
        self.backbone_nodes += bb;
        self.encoder_nodes += t.count(Component::Encoder) as u64;
        self.backbone_backward_flops += t.flops(Component::Backbone);
        self.total_backward_flops += t.total_backward_flops;
        if bb > 0 {
            self.steps_with_backbone += 1;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochMetrics>,
    pub traces: TraceStats,
    pub final_top1: Option<f64>,
}

impl RunReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Number of consecutive, disjoint `window`-epoch blocks whose mean loss
/// exceeds the previous block's. A trailing partial block is ignored.
pub fn window_violations(losses: &[f64], window: usize) -> usize {
    let means: Vec<f64> = losses
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Which trace contents abort a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TraceGuard {
    None,
    /// No Backbone node may appear.
    NoBackbone,
    /// Neither Backbone nor Encoder nodes may appear.
    NoBackboneOrEncoder,
}

impl TraceGuard {
    fn check(self, t: &BackwardTrace, step: u64) -> Result<()> {
        let bad = match self {
            TraceGuard::None => None,
            TraceGuard::NoBackbone => t.visited.iter().find(|e| e.component == Component::Backbone),
            TraceGuard::NoBackboneOrEncoder => t
                .visited
                .iter()
                .find(|e| matches!(e.component, Component::Backbone | Component::Encoder)),
        };
        match bad {
            Some(e) => Err(Error::Invariant(format!(
                "step {step}: backward trace visited {} node {}",
                e.component, e.id
            ))),
            None => Ok(()),
        }
    }
}

/// Callback receiving each epoch's metrics as soon as it is complete.
pub type MetricsSink<'a> = &'a mut dyn FnMut(&EpochMetrics);

fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Top-1 accuracy of `logits` over `data`, evaluated in batches with running
/// batch-norm statistics.
pub fn evaluate<T: Element>(graph: &mut ModelGraph<T>, logits: NodeId, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let opts = ForwardOptions::eval().with_targets(vec![logits]);
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        graph.forward(&x.cast(), &opts)?;
        let pred = argmax_rows(graph.output(logits).unwrap());
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    graph: &mut ModelGraph<f32>,
    logits: NodeId,
    loss: NodeId,
    trainable: &TrainableSet,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    guard: TraceGuard,
    sink: MetricsSink,
) -> Result<RunReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::default();
    let mut report = RunReport::default();
    let opts = ForwardOptions::train(graph, trainable).with_targets(vec![loss]);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(&mut rng, train.len());
        let mut loss_sum = 0.0;
        let mut bb_flops = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let step_opts = ForwardOptions {
                labels: Some(y),
                ..opts.clone()
            };
            graph.forward(&x, &step_opts)?;
            loss_sum += graph.loss_value(loss).unwrap() as f64 * chunk.len() as f64;
            let (grads, trace) = graph.backward(loss, trainable)?;
            guard.check(&trace, opt.step + 1)?;
            bb_flops += trace.flops(Component::Backbone);
            report.traces.add(&trace);
            adam_step(graph, &grads, &mut opt, cfg)?;
        }
        let top1 = match test {
            Some(t) => Some(evaluate(graph, logits, t, 64)?),
            None => None,
        };
        let m = EpochMetrics {
            stage: cfg.stage.as_str().to_string(),
            epoch,
            loss: loss_sum / train.len() as f64,
            top1,
            backbone_backward_flops: bb_flops,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        sink(&m);
        report.epochs.push(m);
    }
    report.final_top1 = match (report.epochs.last(), test) {
        (Some(e), _) => e.top1,
        (None, Some(t)) => Some(evaluate(graph, logits, t, 64)?),
        (None, None) => None,
    };
    Ok(report)
}

/// Trains backbone and classifier on the source task with cross-entropy.
pub fn pretrain(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: MetricsSink,
) -> Result<RunReport> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain needs a Pretrain-stage config".into()));
    }
    let trainable = TrainableSet::from_components(&net.graph, &cfg.trainable);
    let backbone = TrainableSet::from_components(&net.graph, &[Component::Backbone]);
    if !backbone.is_subset(&trainable) || backbone.is_empty() {
        return Err(Error::Config("pretraining must train every backbone parameter".into()));
    }
    net.trainable = trainable.clone();
    fit(&mut net.graph, net.logits, net.loss, &trainable, train, test, cfg, TraceGuard::None, sink)
}

/// Mean reconstruction MSE of each autoencoder on `data`, with the
/// backbone and autoencoders in inference mode.
pub fn reconstruction_mse(net: &mut AutoencoderNetwork<f32>, data: &Dataset, batch: usize) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses: Vec<NodeId> = net.autoencoders.iter().map(|a| a.loss).collect();
    let opts = ForwardOptions::eval().with_targets(losses.clone());
    let mut sums = vec![0.0; losses.len()];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        net.graph.forward(&x, &opts)?;
        for (s, &l) in sums.iter_mut().zip(&losses) {
            *s += net.graph.loss_value(l).unwrap() as f64 * chunk.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / data.len() as f64).collect())
}

/// Trains every autoencoder against the frozen backbone activation it
/// compresses. Each autoencoder has its own loss, backward pass and
/// optimizer; the reported epoch loss is the sum of their mean MSEs.
pub fn train_autoencoders(
    net: &mut AutoencoderNetwork<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: MetricsSink,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.stage != Stage::AeTrain {
        return Err(Error::Config("autoencoder training needs an AeTrain-stage config".into()));
    }
    if cfg.component_set() != BTreeSet::from([Component::Encoder, Component::AuxDecoder]) {
        return Err(Error::Config("autoencoder training trains exactly encoders and decoders".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if net.autoencoders.is_empty() {
        return Err(Error::Config("no encoder-fed attachment points".into()));
    }
    for a in &net.autoencoders {
        let (t, d) = (net.graph.node(a.target).shape, net.graph.node(a.decoder).shape);
        if t != d {
            return Err(Error::dim("autoencoder", format!("stage {}: target {t} vs decoder {d}", a.stage)));
        }
    }
    let per_ae: Vec<(NodeId, TrainableSet)> = net
        .autoencoders
        .iter()
        .map(|a| Ok((a.loss, TrainableSet::new(&net.graph, [a.encoder, a.decoder])?)))
        .collect::<Result<_>>()?;
    let losses: Vec<NodeId> = per_ae.iter().map(|p| p.0).collect();
    let opts = ForwardOptions::eval().with_targets(losses.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states: Vec<OptimizerState> = vec![OptimizerState::default(); per_ae.len()];
    let mut report = RunReport::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(&mut rng, train.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, _) = train.batch(chunk);
            net.graph.forward(&x, &opts)?;
            // all backward passes read the same cached forward, so they run
            // before any parameter update invalidates it
            let mut step_grads = Vec::with_capacity(per_ae.len());
            for ((loss, trainable), state) in per_ae.iter().zip(&states) {
                loss_sum += net.graph.loss_value(*loss).unwrap() as f64 * chunk.len() as f64;
                let (grads, trace) = net.graph.backward(*loss, trainable)?;
                TraceGuard::NoBackbone.check(&trace, state.step + 1)?;
                report.traces.add(&trace);
                step_grads.push(grads);
            }
            for (grads, state) in step_grads.iter().zip(states.iter_mut()) {
                adam_step(&mut net.graph, grads, state, cfg)?;
            }
        }
        let m = EpochMetrics {
            stage: cfg.stage.as_str().to_string(),
            epoch,
            loss: loss_sum / train.len() as f64,
            top1: None,
            backbone_backward_flops: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        sink(&m);
        report.epochs.push(m);
    }
    if let Some(t) = test {
        // held-out loss after training, reported as an extra line
        let start = Instant::now();
        let mse: f64 = reconstruction_mse(net, t, 64)?.iter().sum();
        let m = EpochMetrics {
            stage: format!("{}_heldout", cfg.stage.as_str()),
            epoch: cfg.epochs,
            loss: mse,
            top1: None,
            backbone_backward_flops: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        sink(&m);
        report.epochs.push(m);
    }
    Ok(report)
}

/// Trains the thin adapters and classifier (plus encoders in joint mode)
/// with the backbone frozen and its batch norms on running statistics. A
/// backward trace touching the backbone (or the encoders, outside joint
/// mode) aborts the run with an invariant error.
pub fn adapt(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: MetricsSink,
) -> Result<RunReport> {
    if cfg.stage != Stage::Adapt {
        return Err(Error::Config("adapt needs an Adapt-stage config".into()));
    }
    if net.adapter.is_none() {
        return Err(Error::Config("adapt needs a network with thin adapters".into()));
    }
    let mut expected = BTreeSet::from([Component::Adapter, Component::Classifier]);
    if cfg.joint_encoder {
        expected.insert(Component::Encoder);
    }
    if cfg.component_set() != expected {
        return Err(Error::Config(format!(
            "adaptation trains exactly {:?}, config lists {:?}",
            expected, cfg.trainable
        )));
    }
    let trainable = TrainableSet::from_components(&net.graph, &cfg.trainable);
    net.trainable = trainable.clone();
    let guard = if cfg.joint_encoder {
        TraceGuard::NoBackbone
    } else {
        TraceGuard::NoBackboneOrEncoder
    };
    fit(&mut net.graph, net.logits, net.loss, &trainable, train, test, cfg, guard, sink)
}

/// The adaptation loop with a baseline's trainable set; traces are logged,
/// not restricted.
pub fn run_baseline_adaptation(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: MetricsSink,
) -> Result<RunReport> {
    if cfg.stage != Stage::Adapt {
        return Err(Error::Config("baseline adaptation needs an Adapt-stage config".into()));
    }
    let trainable = TrainableSet::from_components(&net.graph, &cfg.trainable);
    if trainable.is_empty() {
        return Err(Error::Config("baseline has no trainable parameters".into()));
    }
    net.trainable = trainable.clone();
    fit(&mut net.graph, net.logits, net.loss, &trainable, train, test, cfg, TraceGuard::None, sink)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig { lr, ..TrainConfig::adapt(false) }
    }

    #[test]
    fn window_violations_compare_block_means() {
        assert_eq!(window_violations(&[5.0, 4.0, 3.0, 2.0], 2), 0);
        assert_eq!(window_violations(&[1.0, 1.0, 2.0, 0.5, 0.1, 0.1, 9.0], 2), 1);
        assert_eq!(window_violations(&[1.0, 2.0, 3.0], 1), 2);
        assert_eq!(window_violations(&[1.0], 5), 0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.0, 0.0]);
        let (mut m, mut v) = (Tensor::vector(vec![0.0; 2]), Tensor::vector(vec![0.0; 2]));
        adam_update(&mut p, &g, &mut m, &mut v, 1, &cfg(0.1)).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::<f64>::vector(vec![0.0, 0.0, 0.0]);
        let g = Tensor::vector(vec![3.0, -0.5, 1e-3]);
        let (mut m, mut v) = (Tensor::vector(vec![0.0; 3]), Tensor::vector(vec![0.0; 3]));
        adam_update(&mut p, &g, &mut m, &mut v, 1, &cfg(0.01)).unwrap();
        for (x, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f32>::vector(vec![0.0; 2]);
        let g = Tensor::vector(vec![0.0; 3]);
        let (mut m, mut v) = (Tensor::vector(vec![0.0; 2]), Tensor::vector(vec![0.0; 2]));
        assert!(adam_update(&mut p, &g, &mut m, &mut v, 1, &cfg(0.1)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::pretrain().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::pretrain() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::pretrain() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::pretrain() }.validate().is_err());
        assert!(TrainConfig { loss: LossKind::Mse, ..TrainConfig::pretrain() }.validate().is_err());
        assert_eq!(TrainConfig::adapt(true).trainable.len(), 3);
    }
}
