use super::loss::kernel_distance;
use crate::error::{NernError, Result};
use crate::tensor::Tensor;

/// Complete graph over kernels with a symmetric distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDistanceGraph {
    n: usize,
    d: Vec<f64>,
}

impl KernelDistanceGraph {
    /// Builds the graph from `dist(i, j)` evaluated for `i < j`.
    pub fn from_fn(n: usize, mut dist: impl FnMut(usize, usize) -> f64) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = dist(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self { n, d }
    }

    pub fn from_matrix(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(NernError::Shape(format!("{} entries for {n} vertices", d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(NernError::InvalidArgument(format!("d[{i}][{i}] is not zero")));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if v < 0.0 || v.is_nan() || v != d[j * n + i] {
                    return Err(NernError::InvalidArgument(format!("bad distance at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Kernels of a `[F, C, k, k]` weight, enumerated `(f, c)` row-major.
pub fn kernel_graph(w: &Tensor<f32>) -> Result<KernelDistanceGraph> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(NernError::Shape(format!("expected a [F, C, k, k] weight, got {s:?}")));
    }
    let k = s[2];
    let kk = k * k;
    let data = w.data();
    Ok(KernelDistanceGraph::from_fn(s[0] * s[1], |i, j| {
        kernel_distance(&data[i * kk..(i + 1) * kk], &data[j * kk..(j + 1) * kk], k)
    }))
}

/// Nearest-neighbour path from vertex 0; ties go to the lowest index.
pub fn greedy_hamiltonian(g: &KernelDistanceGraph) -> Vec<usize> {
    let n = g.len();
    if n == 0 {
        return Vec::new();
    }
    let mut visited = vec![false; n];
    let mut path = Vec::with_capacity(n);
    let mut current = 0;
    visited[0] = true;
    path.push(0);
    for _ in 1..n {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !visited[j] && best.map_or(true, |b| g.dist(current, j) < g.dist(current, b)) {
                best = Some(j);
            }
        }
        let next = best.expect("unvisited vertex remains");
        visited[next] = true;
        path.push(next);
        current = next;
    }
    path
}

pub fn path_weight(g: &KernelDistanceGraph, path: &[usize]) -> f64 {
    path.windows(2).map(|p| g.dist(p[0], p[1])).sum()
}
