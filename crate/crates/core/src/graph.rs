//! Undirected graphs, symmetric adjacency normalization and graph convolution.

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Undirected, unweighted graph over `n_nodes` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    adjacency: Vec<f64>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Self-loops are rejected;
    /// repeated edges collapse into one.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_nodes == 0 {
            return contract_err("graph needs at least one node");
        }
        let mut adjacency = vec![0.0; n_nodes * n_nodes];
        for &(i, j) in edges {
            if i >= n_nodes || j >= n_nodes {
                return dim_err(format!("edge ({i}, {j}) outside {n_nodes} nodes"));
            }
            if i == j {
                return contract_err(format!("self-loop on node {i}"));
            }
            adjacency[i * n_nodes + j] = 1.0;
            adjacency[j * n_nodes + i] = 1.0;
        }
        Ok(Self { n_nodes, adjacency })
    }

    /// Validates a dense 0/1 adjacency matrix: square, symmetric, zero diagonal.
    pub fn from_adjacency(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        if a.shape().len() != 2 || a.shape()[1] != n {
            return dim_err(format!("adjacency must be square, got {:?}", a.shape()));
        }
        let d = a.data();
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return contract_err(format!("nonzero diagonal at node {i}"));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if v != 0.0 && v != 1.0 {
                    return contract_err(format!("adjacency entry ({i}, {j}) = {v} not in {{0, 1}}"));
                }
                if v != d[j * n + i] {
                    return contract_err(format!("adjacency is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(Self { n_nodes: n, adjacency: d.to_vec() })
    }

    pub fn ring(n_nodes: usize) -> Result<Self> {
        let edges: Vec<_> = match n_nodes {
            0 | 1 => vec![],
            2 => vec![(0, 1)],
            _ => (0..n_nodes).map(|i| (i, (i + 1) % n_nodes)).collect(),
        };
        Self::from_edges(n_nodes, &edges)
    }

    pub fn path(n_nodes: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n_nodes).map(|i| (i - 1, i)).collect();
        Self::from_edges(n_nodes, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> Tensor {
        Tensor::from_raw(vec![self.n_nodes, self.n_nodes], self.adjacency.clone())
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_nodes + j] != 0.0
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(g: &Graph) -> Tensor {
    let n = g.n_nodes;
    let mut a = g.adjacency.clone();
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a[i * n..(i + 1) * n].iter().sum();
            1.0 / deg.sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Tensor::from_raw(vec![n, n], a)
}

/// `act(Â · H · W)`. `h` may stack several graphs' node rows; `Â` is applied per block.
pub fn gcn_layer(tape: &mut Tape, h: Var, a_hat: Var, w: Var, act: Activation) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let z = tape.propagate(a_hat, hw)?;
    tape.activation(z, act)
}

/// Parameters of the attention-style adaptive adjacency.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveParams {
    /// `N x N`, left-multiplies the gated score matrix.
    pub w1: Var,
    /// `F x d`
    pub w2: Var,
    /// `d x d`
    pub w3: Var,
    /// `F x d`
    pub w4: Var,
    /// `N x N`
    pub b: Var,
}

/// `W1 · relu((X W2) W3 (X W4)^T + b)` for node features `x` of shape `N x F`.
pub fn adaptive_adjacency(tape: &mut Tape, x: Var, p: &AdaptiveParams) -> Result<Var> {
    let left = tape.matmul(x, p.w2)?;
    let left = tape.matmul(left, p.w3)?;
    let right = tape.matmul(x, p.w4)?;
    let right_t = tape.transpose(right)?;
    let scores = tape.matmul(left, right_t)?;
    if tape.shape(scores) != tape.shape(p.b) {
        return dim_err(format!(
            "adaptive bias {:?} for scores {:?}",
            tape.shape(p.b),
            tape.shape(scores)
        ));
    }
    let scores = tape.add(scores, p.b)?;
    let gated = tape.relu(scores)?;
    tape.matmul(p.w1, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::params::ParamSet;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn single_node_normalizes_to_one() {
        let g = Graph::from_edges(1, &[]).unwrap();
        assert_eq!(normalize_adjacency(&g).data(), &[1.0]);
    }

    #[test]
    fn two_node_edge() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        assert_close(normalize_adjacency(&g).data(), &[0.5, 0.5, 0.5, 0.5], 1e-15);
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(Graph::from_adjacency(&a).is_err());
        let loops = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(Graph::from_adjacency(&loops).is_err());
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 0), (0, 1), (1, 2)]).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn identity_gcn_is_identity() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0]).unwrap());
        let a = tape.constant(Tensor::eye(3));
        let w = tape.constant(Tensor::eye(2));
        let out = gcn_layer(&mut tape, h, a, w, Activation::Identity).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        let out = gcn_layer(&mut tape, h, a, w, Activation::Relu).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.5, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn path_graph_one_hot_reads_out_column() {
        let g = Graph::path(4).unwrap();
        let a_hat = normalize_adjacency(&g);
        // brute-force neighbour aggregation with self-loops
        let deg = [2.0f64, 3.0, 3.0, 2.0];
        let brute = |i: usize, j: usize| {
            let linked = i == j || (i as isize - j as isize).abs() == 1;
            if linked {
                1.0 / (deg[i] * deg[j]).sqrt()
            } else {
                0.0
            }
        };
        for src in 0..4 {
            let mut onehot = vec![0.0; 4];
            onehot[src] = 1.0;
            let mut tape = Tape::new();
            let h = tape.constant(Tensor::matrix(4, 1, onehot).unwrap());
            let a = tape.constant(a_hat.clone());
            let w = tape.constant(Tensor::eye(1));
            let out = gcn_layer(&mut tape, h, a, w, Activation::Identity).unwrap();
            let expect: Vec<f64> = (0..4).map(|i| brute(i, src)).collect();
            assert_close(tape.value(out).data(), &expect, 1e-15);
        }
    }

    #[test]
    fn spectral_radius_at_most_one() {
        for g in [Graph::ring(6).unwrap(), Graph::path(5).unwrap(), Graph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap()] {
            let a = normalize_adjacency(&g);
            let n = g.n_nodes();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(a.at(i, j), a.at(j, i));
                }
            }
            // power iteration on the symmetric matrix
            let mut v = vec![1.0; n];
            v[0] = 2.0;
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = crate::tensor::matmul_raw(a.data(), &v, n, n, 1);
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.iter().map(|x| x / norm).collect();
            }
            assert!(lambda <= 1.0 + 1e-9, "{lambda}");
        }
    }

    fn adaptive_set(n: usize, f: usize, d: usize, w1: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w1", w1);
        p.push("w2", Tensor::new(vec![f, d], (0..f * d).map(|i| 0.3 - 0.1 * i as f64).collect()).unwrap());
        p.push("w3", Tensor::new(vec![d, d], (0..d * d).map(|i| 0.2 + 0.05 * i as f64).collect()).unwrap());
        p.push("w4", Tensor::new(vec![f, d], (0..f * d).map(|i| -0.25 + 0.15 * i as f64).collect()).unwrap());
        p.push("b", Tensor::full(&[n, n], 0.1));
        p
    }

    fn adaptive_from(vars: &[Var]) -> AdaptiveParams {
        AdaptiveParams { w1: vars[0], w2: vars[1], w3: vars[2], w4: vars[3], b: vars[4] }
    }

    #[test]
    fn adaptive_zero_input_zero_bias() {
        let mut tape = Tape::new();
        let mut p = adaptive_set(3, 2, 2, Tensor::eye(3));
        *p.get_mut(4) = Tensor::zeros(&[3, 3]);
        let vars = p.load(&mut tape);
        let ap = adaptive_from(&vars);
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let out = adaptive_adjacency(&mut tape, x, &ap).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 9]);
    }

    #[test]
    fn adaptive_two_nodes_by_hand() {
        // W1 = W2 = W3 = I, b = 0, so the output is relu(x (x W4)^T)
        let mut p = ParamSet::new();
        p.push("w1", Tensor::eye(2));
        p.push("w2", Tensor::eye(2));
        p.push("w3", Tensor::eye(2));
        p.push("w4", Tensor::matrix(2, 2, vec![1.0, 0.5, 0.0, 2.0]).unwrap());
        p.push("b", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let vars = p.load(&mut tape);
        let ap = adaptive_from(&vars);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, -1.0]).unwrap());
        let out = adaptive_adjacency(&mut tape, x, &ap).unwrap();
        // x W4 = [[1, 4.5], [3, -0.5]]; scores = x (x W4)^T
        // row0: [1*1 + 2*4.5, 1*3 + 2*(-0.5)] = [10, 2]
        // row1: [3*1 + (-1)*4.5, 3*3 + (-1)*(-0.5)] = [-1.5, 9.5] -> relu
        assert_close(tape.value(out).data(), &[10.0, 2.0, 0.0, 9.5], 1e-12);
    }

    #[test]
    fn adaptive_gradient_check() {
        let w1 = Tensor::matrix(3, 3, vec![0.9, 0.1, -0.2, 0.3, 1.1, 0.0, -0.1, 0.2, 0.8]).unwrap();
        let p = adaptive_set(3, 2, 2, w1);
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 1.5, 0.3, -0.7, 0.9]).unwrap();
        let err = grad_check_params(
            |tape, vars| {
                let ap = adaptive_from(vars);
                let xv = tape.constant(x.clone());
                let a = adaptive_adjacency(tape, xv, &ap)?;
                let s = tape.square(a)?;
                tape.mean(s)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
