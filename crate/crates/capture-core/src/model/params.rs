//! Named parameter storage and the graph wrapper that lazily registers
//! parameters as tape leaves.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::{Mat, NodeId, Tape};
use crate::error::{CoreError, Result};

/// Ordered name → tensor map. Order is fixed at construction time and shared
/// by optimizer state and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Mat) {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[self.by_name[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        &mut self.tensors[self.by_name[name]]
    }

    pub fn tensor(&self, idx: usize) -> &Mat {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total scalar element count.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.nrows() * t.ncols()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gaussian init with the usual transformer std.
pub const INIT_STD: f64 = 0.02;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    // Box-Muller keeps us independent of distribution-crate sampling order.
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

/// A tape plus the parameter set it reads from. Parameters become leaves on
/// first use so the backward pass can hand their gradients back by index.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    nodes: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            nodes: vec![None; params.len()],
        }
    }

    /// Node id for a named parameter, registering it if needed.
    pub fn p(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let id = self.tape.leaf(self.params.tensor(idx).clone());
        self.nodes[idx] = Some(id);
        id
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.index_of(name).is_some()
    }

    /// Backward from a scalar loss; gradients aligned with the ParamSet order
    /// (zero tensors for parameters the loss never touched).
    pub fn grads(&self, root: NodeId) -> Result<Vec<Mat>> {
        if !self.tape.scalar(root).is_finite() {
            return Err(CoreError::Numeric("non-finite loss".into()));
        }
        let node_grads = self.tape.backward(root);
        let mut out = Vec::with_capacity(self.params.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let shape = self.params.tensor(idx).raw_dim();
            let g = node
                .and_then(|id| node_grads[id].clone())
                .unwrap_or_else(|| Mat::zeros(shape));
            out.push(g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn paramset_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.insert("a", gaussian(&mut rng, 2, 3, 0.02));
        p.insert("b", gaussian(&mut rng, 1, 4, 0.02));
        assert_eq!(p.len(), 2);
        assert_eq!(p.index_of("b"), Some(1));
        assert_eq!(p.element_count(), 10);
        assert_eq!(p.get("a").nrows(), 2);
    }

    #[test]
    fn graph_collects_grads_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.insert("w", gaussian(&mut rng, 3, 3, 0.5));
        p.insert("unused", gaussian(&mut rng, 2, 2, 0.5));
        let mut g = Graph::new(&p);
        let w = g.p("w");
        let sq = g.tape.mul(w, w);
        let ones_c = g.tape.leaf(Mat::from_elem((3, 1), 1.0));
        let col = g.tape.matmul(sq, ones_c);
        let ones_r = g.tape.leaf(Mat::from_elem((1, 3), 1.0));
        let loss = g.tape.matmul(ones_r, col);
        let grads = g.grads(loss).unwrap();
        assert_eq!(grads.len(), 2);
        // d/dw sum(w^2) = 2w
        let expect = p.get("w").mapv(|x| 2.0 * x);
        assert!(grads[0].iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(grads[1].iter().all(|&x| x == 0.0));
    }
}
