use std::collections::BTreeSet;
use std::sync::Arc;

use super::{ModelGraph, NodeId, TrainableSet};
use crate::error::{Error, Result};
use crate::tensor::Element;

impl<T: Element> ModelGraph<T> {
    /// Nodes whose output gradient must be computed to obtain the gradient of
    /// every trainable parameter w.r.t. `loss`.
    ///
    /// A node needs its output gradient exactly when it lies on a path from a
    /// trainable node to the loss, so the set is the intersection of the
    /// loss's ancestors with the trainable nodes' descendants (both
    /// inclusive). Frozen nodes below the lowest trainable node never enter.
    pub fn compute_required_set(&self, loss: NodeId, trainable: &TrainableSet) -> Result<BTreeSet<NodeId>> {
        self.try_node(loss)?;
        let n = self.nodes.len();

        let mut feeds_loss = vec![false; n];
        feeds_loss[loss.0] = true;
        for id in (0..=loss.0).rev() {
            if feeds_loss[id] {
                for &i in &self.nodes[id].inputs {
                    feeds_loss[i.0] = true;
                }
            }
        }

        let mut downstream = vec![false; n];
        for id in trainable.iter() {
            let node = self.try_node(id)?;
            if !node.has_params() {
                return Err(Error::NotParametric(id));
            }
            if !feeds_loss[id.0] {
                return Err(Error::Unreachable(id));
            }
            downstream[id.0] = true;
        }
        for id in 0..n {
            if !downstream[id] && self.nodes[id].inputs.iter().any(|i| downstream[i.0]) {
                downstream[id] = true;
            }
        }

        Ok((0..n)
            .filter(|&i| feeds_loss[i] && downstream[i])
            .map(NodeId)
            .collect())
    }

    /// Memoized [`compute_required_set`](Self::compute_required_set).
    pub fn required_set(&mut self, loss: NodeId, trainable: &TrainableSet) -> Result<Arc<BTreeSet<NodeId>>> {
        let key = (loss, trainable.clone());
        if let Some(set) = self.required.get(&key) {
            return Ok(Arc::clone(set));
        }
        let set = Arc::new(self.compute_required_set(loss, trainable)?);
        self.required.insert(key, Arc::clone(&set));
        Ok(set)
    }
}
