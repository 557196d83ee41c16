use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::reform::QuadraticSubproblem;

/// Fully connected graph of one subproblem.
///
/// Nodes `0..n_var` are the stacked beamformer entries, node `n_var` is the
/// constant. Edges are all ordered pairs `(i, j)`, `i ≠ j`, grouped by
/// receiver `i` so that each node's incoming messages are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemGraph {
    pub n_var: usize,
    /// `(n_var+1)×2`: re/im of the normalized diagonal.
    pub node_features: Tensor,
    /// `E×2`: re/im of `D_aug[i][j] / scale` for edge `(i, j)`.
    pub edge_features: Tensor,
    pub power: f64,
}

impl ProblemGraph {
    pub fn nodes(&self) -> usize {
        self.n_var + 1
    }

    pub fn edges(&self) -> usize {
        self.nodes() * self.n_var
    }

    /// Receiver and sender of edge `e`.
    pub fn edge(&self, e: usize) -> (usize, usize) {
        let n = self.nodes();
        let i = e / (n - 1);
        let k = e % (n - 1);
        (i, if k < i { k } else { k + 1 })
    }
}

pub fn build_graph(sub: &QuadraticSubproblem) -> ProblemGraph {
    let n = sub.n_var() + 1;
    let inv = 1.0 / sub.scale;
    let a = sub.d_aug.as_slice();
    let node_features = Tensor::from_fn(n, 2, |i, c| {
        let z = a[i * n + i] * inv;
        if c == 0 {
            z.re
        } else {
            z.im
        }
    });
    let mut edata = Vec::with_capacity(n * (n - 1) * 2);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let z = a[i * n + j] * inv;
                edata.push(z.re);
                edata.push(z.im);
            }
        }
    }
    let edge_features = Tensor::new(n * (n - 1), 2, edata).expect("edge feature shape");
    ProblemGraph {
        n_var: sub.n_var(),
        node_features,
        edge_features,
        power: sub.power,
    }
}

/// Disjoint union of graphs with global node indices.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub node_features: Tensor,
    pub edge_features: Tensor,
    /// Global receiver of each edge.
    pub receivers: Arc<[usize]>,
    /// Global sender of each edge.
    pub senders: Arc<[usize]>,
    /// Incoming-edge count per node (`n − 1` within its graph).
    pub in_degree: Arc<[usize]>,
    /// Global indices of the variable nodes, graph by graph.
    pub var_nodes: Arc<[usize]>,
    /// Variable-node count per graph.
    pub var_counts: Arc<[usize]>,
    pub budgets: Vec<f64>,
}

impl GraphBatch {
    pub fn new(graphs: &[&ProblemGraph]) -> Self {
        let total_nodes: usize = graphs.iter().map(|g| g.nodes()).sum();
        let total_edges: usize = graphs.iter().map(|g| g.edges()).sum();
        let mut nf = Vec::with_capacity(total_nodes * 2);
        let mut ef = Vec::with_capacity(total_edges * 2);
        let mut recv = Vec::with_capacity(total_edges);
        let mut send = Vec::with_capacity(total_edges);
        let mut deg = Vec::with_capacity(total_nodes);
        let mut var_nodes = Vec::new();
        let mut var_counts = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for g in graphs {
            let n = g.nodes();
            nf.extend_from_slice(g.node_features.as_slice());
            ef.extend_from_slice(g.edge_features.as_slice());
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        recv.push(offset + i);
                        send.push(offset + j);
                    }
                }
                deg.push(n - 1);
            }
            var_nodes.extend(offset..offset + g.n_var);
            var_counts.push(g.n_var);
            offset += n;
        }
        Self {
            node_features: Tensor::new(total_nodes, 2, nf).expect("node shape"),
            edge_features: Tensor::new(total_edges, 2, ef).expect("edge shape"),
            receivers: recv.into(),
            senders: send.into(),
            in_degree: deg.into(),
            var_nodes: var_nodes.into(),
            var_counts: var_counts.into(),
            budgets: graphs.iter().map(|g| g.power).collect(),
        }
    }

    pub fn graphs(&self) -> usize {
        self.var_counts.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ComplexMatrix, ComplexVector, C64};

    fn sub(nt: usize, q: usize) -> QuadraticSubproblem {
        let d = ComplexMatrix::from_fn(nt, nt, |r, c| {
            if r == c {
                C64::new(2.0 + r as f64, 0.0)
            } else {
                C64::new(0.1 * (r + c) as f64, 0.05 * (r as f64 - c as f64))
            }
        });
        let b: Vec<ComplexVector> = (0..q)
            .map(|k| {
                ComplexVector(
                    (0..nt)
                        .map(|r| C64::new(r as f64 + k as f64, -1.0))
                        .collect(),
                )
            })
            .collect();
        QuadraticSubproblem::from_parts(0, &d, &b, 0.1)
    }

    #[test]
    fn full_scale_counts() {
        let g = build_graph(&sub(8, 6));
        assert_eq!(g.nodes(), 49);
        assert_eq!(g.edges(), 2352);
        assert_eq!(g.edge_features.rows(), 2352);
    }

    #[test]
    fn features_follow_d_aug() {
        let s = sub(3, 2);
        let g = build_graph(&s);
        let n = g.nodes();
        for i in 0..n {
            assert_eq!(g.node_features.get(i, 0), s.d_aug[(i, i)].re / s.scale);
        }
        assert_eq!(g.node_features.row(n - 1), &[0.0, 0.0]);
        for e in 0..g.edges() {
            let (i, j) = g.edge(e);
            assert_ne!(i, j);
            let z = s.d_aug[(i, j)] / s.scale;
            assert_eq!(g.edge_features.row(e), &[z.re, z.im]);
            // Hermitian pair.
            let back = (0..g.edges()).find(|&f| g.edge(f) == (j, i)).unwrap();
            assert_eq!(g.edge_features.get(back, 0), z.re);
            assert_eq!(g.edge_features.get(back, 1), -z.im);
        }
    }

    #[test]
    fn scaled_identity_block() {
        let d = ComplexMatrix::identity(2).scaled(5.0);
        let b = vec![ComplexVector::zeros(2)];
        let g = build_graph(&QuadraticSubproblem::from_parts(0, &d, &b, 1.0));
        for i in 0..2 {
            assert_eq!(g.node_features.row(i), &[1.0, 0.0]);
        }
        assert!(g.edge_features.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn batch_offsets() {
        let (a, b) = (build_graph(&sub(2, 1)), build_graph(&sub(1, 2)));
        let batch = GraphBatch::new(&[&a, &b]);
        assert_eq!(batch.node_features.rows(), 6);
        assert_eq!(batch.receivers.len(), 12);
        assert_eq!(&batch.var_nodes[..], &[0, 1, 3, 4]);
        assert_eq!(&batch.in_degree[..], &[2, 2, 2, 2, 2, 2]);
        assert_eq!((batch.receivers[6], batch.senders[6]), (3, 4));
    }
}
