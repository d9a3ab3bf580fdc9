use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Component, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: NodeId,
    pub component: Component,
    pub flops: u64,
}

/// Nodes visited by one backward pass, in visiting order, with the FLOPs
/// each one spent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardTrace {
    pub visited: Vec<TraceEntry>,
    pub total_backward_flops: u64,
}

impl BackwardTrace {
    pub(crate) fn push(&mut self, entry: TraceEntry) {
        self.total_backward_flops += entry.flops;
        self.visited.push(entry);
    }

    pub fn visited_ids(&self) -> BTreeSet<NodeId> {
        self.visited.iter().map(|e| e.id).collect()
    }

    pub fn count(&self, component: Component) -> usize {
        self.visited.iter().filter(|e| e.component == component).count()
    }

    pub fn flops(&self, component: Component) -> u64 {
        self.visited
            .iter()
            .filter(|e| e.component == component)
            .map(|e| e.flops)
            .sum()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.visited.iter().any(|e| e.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_layout() {
        let mut t = BackwardTrace::default();
        t.push(TraceEntry { id: NodeId(7), component: Component::Adapter, flops: 12 });
        t.push(TraceEntry { id: NodeId(3), component: Component::Classifier, flops: 30 });
        assert_eq!(
            t.to_json(),
            r#"{"visited":[{"id":7,"component":"Adapter","flops":12},{"id":3,"component":"Classifier","flops":30}],"total_backward_flops":42}"#
        );
        let back: BackwardTrace = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(t.count(Component::Backbone), 0);
        assert_eq!(t.flops(Component::Classifier), 30);
    }
}
