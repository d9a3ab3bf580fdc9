//! Static cost model: forward FLOPs, backward FLOPs and trainable parameters
//! per component, computed from declared shapes without running any kernel.
//!
//! Multiply-accumulates cost `mac_cost` FLOPs (default 1). Batch norm,
//! ReLU6, addition and pooling cost one FLOP per element. Concatenation and
//! loss nodes are free. Totals are per-sample costs times the batch
//! multiplier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Component, ModelGraph, NodeId, Op, TrainableSet};
use crate::tensor::Element;

/// How a visited node's backward cost relates to its forward cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackwardCost {
    /// Every visited node costs twice its forward FLOPs. Reproduces the
    /// reference accounting (full fine-tuning backward = 2x forward, and
    /// frozen on-path layers charged like trainable ones).
    #[default]
    Doubled,
    /// Trainable nodes cost 2x (input and parameter gradient), frozen nodes
    /// on the gradient path 1x (input gradient only).
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub mac_cost: u64,
    pub batch: u64,
    pub backward: BackwardCost,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            mac_cost: 1,
            batch: 256,
            backward: BackwardCost::Doubled,
        }
    }
}

impl CostModel {
    pub fn per_batch(batch: u64) -> Self {
        CostModel {
            batch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.mac_cost) {
            return Err(Error::Config(format!("mac_cost must be 1 or 2, got {}", self.mac_cost)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch multiplier must be at least 1".into()));
        }
        Ok(())
    }
}

/// Forward FLOPs of one node for a single sample.
pub fn node_forward_flops<T: Element>(graph: &ModelGraph<T>, id: NodeId, mac_cost: u64) -> u64 {
    let node = graph.node(id);
    let out = node.shape;
    let plane = (out.h * out.w) as u64;
    let c_in = || graph.node(node.inputs[0]).shape.c as u64;
    let macs = match node.op {
        Op::Conv1x1 { .. } => plane * c_in() * out.c as u64,
        Op::Conv3x3 { .. } => 9 * plane * c_in() * out.c as u64,
        Op::Depthwise3x3 { .. } => 9 * plane * out.c as u64,
        Op::ChannelScale { .. } => plane * out.c as u64,
        Op::Linear { .. } => graph.node(node.inputs[0]).shape.len() as u64 * out.c as u64,
        _ => 0,
    };
    let elementwise = match node.op {
        Op::BatchNorm | Op::Relu6 | Op::Add => out.len() as u64,
        Op::GlobalAvgPool => graph.node(node.inputs[0]).shape.len() as u64,
        _ => 0,
    };
    macs * mac_cost + elementwise
}

pub fn node_backward_flops(forward: u64, trainable: bool, rule: BackwardCost) -> u64 {
    match (rule, trainable) {
        (BackwardCost::Doubled, _) | (BackwardCost::Split, true) => 2 * forward,
        (BackwardCost::Split, false) => forward,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeCost {
    pub id: NodeId,
    pub component: Component,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub per_node: Vec<NodeCost>,
    pub total: u64,
}

impl FlopCount {
    pub fn by_component(&self, component: Component) -> u64 {
        self.per_node
            .iter()
            .filter(|c| c.component == component)
            .map(|c| c.flops)
            .sum()
    }
}

/// Forward FLOPs of every node, scaled by the batch multiplier.
pub fn count_forward<T: Element>(graph: &ModelGraph<T>, cost: &CostModel) -> Result<FlopCount> {
    cost.validate()?;
    let per_node: Vec<NodeCost> = graph
        .nodes()
        .iter()
        .map(|n| NodeCost {
            id: n.id,
            component: n.component,
            flops: node_forward_flops(graph, n.id, cost.mac_cost) * cost.batch,
        })
        .collect();
    let total = per_node.iter().map(|c| c.flops).sum();
    Ok(FlopCount { per_node, total })
}

/// Backward FLOPs when training `trainable` against `loss`. Nodes outside
/// the required set cost nothing.
pub fn count_backward<T: Element>(
    graph: &ModelGraph<T>,
    loss: NodeId,
    trainable: &TrainableSet,
    cost: &CostModel,
) -> Result<FlopCount> {
    cost.validate()?;
    let required = graph.compute_required_set(loss, trainable)?;
    let per_node: Vec<NodeCost> = required
        .iter()
        .rev()
        .map(|&id| {
            let fwd = node_forward_flops(graph, id, cost.mac_cost);
            NodeCost {
                id,
                component: graph.node(id).component,
                flops: node_backward_flops(fwd, trainable.contains(id), cost.backward) * cost.batch,
            }
        })
        .collect();
    let total = per_node.iter().map(|c| c.flops).sum();
    Ok(FlopCount { per_node, total })
}

/// Trainable parameter elements grouped by component.
pub fn count_params<T: Element>(graph: &ModelGraph<T>, trainable: &TrainableSet) -> BTreeMap<Component, u64> {
    let mut out = BTreeMap::new();
    for id in trainable.iter() {
        *out.entry(graph.node(id).component).or_insert(0) += graph.param_count(id) as u64;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCost {
    pub component: String,
    pub f_flops: u64,
    pub b_flops: u64,
    pub trainable_params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub label: String,
    pub components: Vec<ComponentCost>,
    pub total: ComponentCost,
}

pub fn profile<T: Element>(
    label: &str,
    graph: &ModelGraph<T>,
    loss: NodeId,
    trainable: &TrainableSet,
    cost: &CostModel,
) -> Result<ProfileReport> {
    let fwd = count_forward(graph, cost)?;
    let bwd = count_backward(graph, loss, trainable, cost)?;
    let params = count_params(graph, trainable);
    let mut components = Vec::new();
    for c in Component::ALL {
        if !graph.nodes().iter().any(|n| n.component == c) {
            continue;
        }
        components.push(ComponentCost {
            component: c.as_str().to_string(),
            f_flops: fwd.by_component(c),
            b_flops: bwd.by_component(c),
            trainable_params: params.get(&c).copied().unwrap_or(0),
        });
    }
    let total = ComponentCost {
        component: "total".into(),
        f_flops: components.iter().map(|c| c.f_flops).sum(),
        b_flops: components.iter().map(|c| c.b_flops).sum(),
        trainable_params: components.iter().map(|c| c.trainable_params).sum(),
    };
    Ok(ProfileReport {
        label: label.to_string(),
        components,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ratios {
    pub f_flops_ratio_vs_ref: f64,
    pub b_flops_ratio_vs_ref: f64,
    pub params_ratio_vs_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparedConfig {
    #[serde(flatten)]
    pub report: ProfileReport,
    pub ratios: Ratios,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub reference: String,
    pub cost_model: CostModel,
    pub configs: Vec<ComparedConfig>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if a == b {
        1.0
    } else if b == 0 {
        f64::INFINITY
    } else {
        a as f64 / b as f64
    }
}

/// One report per config plus ratios against the config at `reference`.
pub fn compare_configs(reports: Vec<ProfileReport>, reference: usize, cost: CostModel) -> Result<Comparison> {
    let Some(r) = reports.get(reference).cloned() else {
        return Err(Error::Config(format!(
            "reference index {reference} out of range for {} configs",
            reports.len()
        )));
    };
    let configs = reports
        .into_iter()
        .map(|report| {
            let ratios = Ratios {
                f_flops_ratio_vs_ref: ratio(report.total.f_flops, r.total.f_flops),
                b_flops_ratio_vs_ref: ratio(report.total.b_flops, r.total.b_flops),
                params_ratio_vs_ref: ratio(report.total.trainable_params, r.total.trainable_params),
            };
            ComparedConfig { report, ratios }
        })
        .collect();
    Ok(Comparison {
        reference: r.label,
        cost_model: cost,
        configs,
    })
}

impl Comparison {
    pub fn get(&self, label: &str) -> Option<&ComparedConfig> {
        self.configs.iter().find(|c| c.report.label == label)
    }

    /// `label,component,f_flops,b_flops,trainable_params`, one row per
    /// component and one `total` row per config.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,component,f_flops,b_flops,trainable_params\n");
        for c in &self.configs {
            for row in c.report.components.iter().chain(std::iter::once(&c.report.total)) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    c.report.label, row.component, row.f_flops, row.b_flops, row.trainable_params
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
