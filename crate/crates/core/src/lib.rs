//! Unidirectional thin adapters on a frozen MobileNetV2 backbone: tensors,
//! a pruned reverse-mode graph, architecture builders, a static FLOPs
//! profiler, a three-stage trainer and a synthetic dataset generator.

pub mod arch;
mod binio;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod pipeline;
pub mod profile;
pub mod tensor;
pub mod train;

pub use arch::{build_network, Config, ModelSpec, Network};
pub use error::{Error, Result};
pub use graph::{BackwardTrace, Component, ForwardOptions, ModelGraph, NodeId, Op, TrainableSet};
pub use profile::{BackwardCost, CostModel, ProfileReport};
pub use tensor::{Element, SampleShape, Shape, Tensor};
