//! Per-episode class graph: J-nearest-neighbor connectivity by cosine
//! similarity of the (pre-noise) initial weight estimates, with
//! temperature-softmax edge strengths.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;
use core::ops::Range;

use crate::mathx;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    TooFewNodes { nodes: usize },
    InvalidNeighborCount { j: usize },
    InvalidTemperature { inverse_temperature: f64 },
    NonFiniteSimilarity { node: usize },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::TooFewNodes { nodes } => {
                write!(f, "class graph needs at least 2 nodes, got {nodes}")
            }
            GraphError::InvalidNeighborCount { j } => {
                write!(f, "neighbor count must be positive, got {j}")
            }
            GraphError::InvalidTemperature { inverse_temperature } => {
                write!(f, "inverse temperature must be positive, got {inverse_temperature}")
            }
            GraphError::NonFiniteSimilarity { node } => {
                write!(f, "non-finite similarity encountered at node {node}")
            }
        }
    }
}

impl core::error::Error for GraphError {}

/// Directed neighbor lists with softmax edge strengths. For every node
/// `i`, `neighbors(i)` holds `min(J, N-1)` indices (self excluded) in
/// decreasing-similarity order, and the aligned strengths sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGraph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
    strengths: Vec<Vec<f64>>,
}

impl ClassGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn strengths(&self, node: usize) -> &[f64] {
        &self.strengths[node]
    }

    /// Flatten edges into receiver-major arrays for batched message
    /// passing: `(receivers, senders, strengths, per-node ranges)`.
    pub fn flat_edges(&self) -> FlatEdges {
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        let mut strengths = Vec::new();
        let mut segments = Vec::with_capacity(self.num_nodes);
        for i in 0..self.num_nodes {
            let start = senders.len();
            for (&j, &a) in self.neighbors[i].iter().zip(&self.strengths[i]) {
                receivers.push(i);
                senders.push(j);
                strengths.push(a);
            }
            segments.push(start..senders.len());
        }
        FlatEdges {
            receivers,
            senders,
            strengths,
            segments,
        }
    }

    /// Plain-text adjacency listing `i: (j, a_ij) ...`, one node per line.
    pub fn dump_adjacency(&self) -> String {
        let mut out = String::new();
        for i in 0..self.num_nodes {
            let _ = write!(out, "{i}:");
            for (&j, &a) in self.neighbors[i].iter().zip(&self.strengths[i]) {
                let _ = write!(out, " ({j}, {a})");
            }
            out.push('\n');
        }
        out
    }
}

/// Edge list flattened in receiver order; `segments[i]` indexes the edges
/// received by node `i`.
#[derive(Clone, Debug)]
pub struct FlatEdges {
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
    pub strengths: Vec<f64>,
    pub segments: Vec<Range<usize>>,
}

/// Connect each node to its `J` most cosine-similar peers (self excluded;
/// ties broken by lower index) and weight the edges with a temperature
/// softmax over the selected similarities. Rows of `initial_weights` are
/// expected to be L2-normalized, so dot products are cosines.
pub fn build_graph(
    initial_weights: &Matrix,
    j: usize,
    inverse_temperature: f64,
) -> Result<ClassGraph, GraphError> {
    let n = initial_weights.rows();
    if n < 2 {
        return Err(GraphError::TooFewNodes { nodes: n });
    }
    if j == 0 {
        return Err(GraphError::InvalidNeighborCount { j });
    }
    if !(inverse_temperature > 0.0) {
        return Err(GraphError::InvalidTemperature { inverse_temperature });
    }
    let take = j.min(n - 1);
    let mut neighbors = Vec::with_capacity(n);
    let mut strengths = Vec::with_capacity(n);
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        sims.clear();
        let wi = initial_weights.row(i);
        for k in 0..n {
            if k == i {
                continue;
            }
            let s: f64 = wi
                .iter()
                .zip(initial_weights.row(k))
                .map(|(&a, &b)| a * b)
                .sum();
            if !s.is_finite() {
                return Err(GraphError::NonFiniteSimilarity { node: i });
            }
            sims.push((s, k));
        }
        // Decreasing similarity; equal similarities rank the lower index first.
        sims.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("similarities are finite")
                .then_with(|| a.1.cmp(&b.1))
        });
        let selected = &sims[..take];
        let max_s = selected
            .iter()
            .map(|&(s, _)| inverse_temperature * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = selected
            .iter()
            .map(|&(s, _)| mathx::exp(inverse_temperature * s - max_s))
            .collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        neighbors.push(selected.iter().map(|&(_, k)| k).collect());
        strengths.push(weights);
    }
    Ok(ClassGraph {
        num_nodes: n,
        neighbors,
        strengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn equidistant_triangle_has_uniform_strengths() {
        // three unit vectors with pairwise cosine -1/2
        let s3 = mathx::sqrt(3.0);
        let w = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-0.5, s3 / 2.0],
            vec![-0.5, -s3 / 2.0],
        ])
        .unwrap();
        let g = build_graph(&w, 2, 5.0).unwrap();
        for i in 0..3 {
            assert_eq!(g.neighbors(i).len(), 2);
            for &a in g.strengths(i) {
                assert!((a - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_softmax_on_two_neighbors() {
        // sims(0->1) = 0.9, sims(0->2) = 0.5, inverse temperature 5
        let c = |x: f64| mathx::sqrt(1.0 - x * x);
        let w = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.9, c(0.9), 0.0],
            vec![0.5, 0.0, c(0.5)],
        ])
        .unwrap();
        let g = build_graph(&w, 2, 5.0).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        let e2 = mathx::exp(5.0 * 0.9 - 5.0 * 0.5);
        assert!((g.strengths(0)[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((g.strengths(0)[0] - 0.8808).abs() < 1e-4);
        assert!((g.strengths(0)[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            build_graph(&w, 2, 5.0),
            Err(GraphError::TooFewNodes { nodes: 1 })
        ));
        let w2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(build_graph(&w2, 0, 5.0).is_err());
        assert!(build_graph(&w2, 2, 0.0).is_err());
    }

    #[test]
    fn small_n_uses_all_other_nodes() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = build_graph(&w, 10, 5.0).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.strengths(0), &[1.0]);
    }

    #[test]
    fn no_self_loops_and_rows_sum_to_one() {
        let mut stream = crate::rng::stream_from_seed(17);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..6).map(|_| crate::rng::normal(&mut stream, 1.0)).collect())
            .collect();
        let w = Matrix::from_rows(&rows).unwrap().l2_normalize_rows();
        let g = build_graph(&w, 4, 5.0).unwrap();
        for i in 0..12 {
            assert!(!g.neighbors(i).contains(&i));
            assert_eq!(g.neighbors(i).len(), 4);
            let sum: f64 = g.strengths(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for &a in g.strengths(i) {
                assert!(a > 0.0 && a <= 1.0);
            }
        }
    }

    #[test]
    fn flat_edges_align_with_adjacency() {
        let w = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let g = build_graph(&w, 2, 5.0).unwrap();
        let fe = g.flat_edges();
        assert_eq!(fe.senders.len(), 6);
        for i in 0..3 {
            let seg = fe.segments[i].clone();
            assert_eq!(&fe.senders[seg.clone()], g.neighbors(i));
            for e in fe.segments[i].clone() {
                assert_eq!(fe.receivers[e], i);
            }
        }
    }

    #[test]
    fn dump_lists_every_node() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = build_graph(&w, 1, 5.0).unwrap();
        let dump = g.dump_adjacency();
        assert!(dump.starts_with("0: (1, 1)"));
        assert_eq!(dump.lines().count(), 2);
    }
}
