//! Symmetric normalization of weighted propagation graphs.

use csda_autodiff::tape::{weighted_adjacency, DEGREE_FLOOR};
use csda_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::graph::PropagationGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    /// `D^-1/2 (A + S) D^-1/2`, `N x N`.
    pub matrix: Tensor,
    /// Row sums of the weighted adjacency before flooring.
    pub degree: Vec<f64>,
}

/// Each directed edge's weight lands on both `(i, j)` and `(j, i)`; the
/// diagonal carries `node_self_weights`. Degrees are floored at 1e-8.
pub fn normalize_adjacency(
    g: &PropagationGraph,
    edge_weights: &[f64],
    node_self_weights: &[f64],
) -> Result<NormalizedAdjacency> {
    let n = g.num_nodes();
    if edge_weights.len() != g.edges.len() || node_self_weights.len() != n {
        return Err(Error::Contract(format!(
            "{} edge weights / {} self weights for {} edges / {n} nodes",
            edge_weights.len(),
            node_self_weights.len(),
            g.edges.len()
        )));
    }
    let in_unit = |v: &f64| (0.0..=1.0).contains(v);
    if !edge_weights.iter().all(in_unit) || !node_self_weights.iter().all(in_unit) {
        return Err(Error::Contract("adjacency weights must lie in [0, 1]".into()));
    }
    let mut matrix = weighted_adjacency(edge_weights, node_self_weights, &g.edges, n);
    let degree: Vec<f64> = (0..n).map(|i| matrix.row(i).iter().sum()).collect();
    let scale: Vec<f64> = degree.iter().map(|d| 1.0 / d.max(DEGREE_FLOOR).sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = matrix.get(i, j) * scale[i] * scale[j];
            matrix.set(i, j, v);
        }
    }
    Ok(NormalizedAdjacency { matrix, degree })
}

/// Unweighted symmetric adjacency plus identity, the GIN aggregation
/// operator with epsilon 0.
pub fn gin_aggregation_matrix(g: &PropagationGraph) -> Tensor {
    let n = g.num_nodes();
    let mut a = Tensor::identity(n);
    for &(u, v) in &g.edges {
        a.set(u, v, a.get(u, v) + 1.0);
        a.set(v, u, a.get(v, u) + 1.0);
    }
    a
}
