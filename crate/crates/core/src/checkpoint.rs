//! `UDTC` checkpoints: magic, version, record count, then one record per
//! tensor (name length, UTF-8 name, rank, dims, f32 payload), little-endian.

use std::fs;
use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::graph::{GraphNode, ModelGraph};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UDTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Every parameter and buffer of `graph` accepted by `filter`, in node
    /// order.
    pub fn from_graph(graph: &ModelGraph<f32>, filter: impl Fn(&GraphNode) -> bool) -> Self {
        let keep: std::collections::BTreeSet<&str> =
            graph.nodes().iter().filter(|n| filter(n)).map(|n| n.name.as_str()).collect();
        let tensors = graph
            .named_tensors()
            .into_iter()
            .filter(|(name, _)| keep.contains(name.rsplit_once('.').map_or(name.as_str(), |p| p.0)))
            .map(|(name, t)| (name, t.clone()))
            .collect();
        Checkpoint { tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Truncated {
                path: path.to_path_buf(),
                detail: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            if rank != 4 {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    detail: format!("`{name}` has rank {rank}, expected 4"),
                });
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let data = r.f32s(shape.len())?;
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes after {count} records", r.remaining()),
            });
        }
        Ok(Checkpoint { tensors })
    }

    /// Copies every record whose name and shape match a tensor of `graph`.
    /// Returns the number of tensors written; names missing from the graph
    /// are ignored, shape mismatches are errors.
    pub fn apply(&self, graph: &mut ModelGraph<f32>) -> Result<usize> {
        let mut written = 0;
        for (name, t) in &self.tensors {
            if let Some(dst) = graph.tensor_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::dim(
                        "checkpoint",
                        format!("`{name}`: stored {} vs graph {}", t.shape(), dst.shape()),
                    ));
                }
                *dst = t.clone();
                written += 1;
            }
        }
        Ok(written)
    }
}
