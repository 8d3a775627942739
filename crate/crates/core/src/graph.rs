//! Sensor graphs and the propagation operator of the GCN encoder.
//!
//! The default operator is `L = D^{-1/2} (I − A) D^{1/2}` taken literally,
//! with `D` the degree matrix of `A`. [`LaplacianKind::GcnClassic`]
//! provides the usual renormalized `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃`
//! the degree matrix of `A + I`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaplacianKind {
    #[default]
    Paper,
    GcnClassic,
    /// Ignore the adjacency and propagate with `I`.
    Identity,
}

impl std::str::FromStr for LaplacianKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "gcn-classic" => Ok(Self::GcnClassic),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!(
                "unknown laplacian `{other}` (expected paper, gcn-classic or identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub adjacency: Array,
    pub degree: Array,
    pub laplacian: Array,
    pub identity: bool,
}

impl Graph {
    pub fn n_nodes(&self) -> usize {
        self.laplacian.shape()[0]
    }

    /// Undirected edge list `i < j` with nonzero weight.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let n = self.adjacency.shape()[0];
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.at(i, j) != 0.0 {
                    out.push([i, j]);
                }
            }
        }
        out
    }
}

fn validate_adjacency(adjacency: &Array) -> Result<Array> {
    let s = adjacency.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Graph(format!("adjacency must be square, found {s:?}")));
    }
    let n = s[0];
    let mut sym = adjacency.clone();
    for i in 0..n {
        if adjacency.at(i, i) != 0.0 {
            return Err(Error::Graph(format!("node {i} has a nonzero self-loop")));
        }
        for j in 0..n {
            let (a, b) = (adjacency.at(i, j), adjacency.at(j, i));
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Graph(format!(
                    "adjacency ({i}, {j}) = {a} is not a nonnegative finite weight"
                )));
            }
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::Graph(format!(
                    "adjacency is asymmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
            sym.set(&[i, j], 0.5 * (a + b));
        }
    }
    Ok(sym)
}

/// Validates `adjacency` and builds the propagation operator of `kind`.
pub fn build_laplacian_with(adjacency: &Array, kind: LaplacianKind) -> Result<Graph> {
    let a = validate_adjacency(adjacency)?;
    let n = a.shape()[0];
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.at(i, j)).sum()).collect();
    if kind != LaplacianKind::Identity {
        if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
            return Err(Error::Graph(format!("node {i} has zero degree")));
        }
    }
    let degree = Array::from_fn(&[n, n], |k| if k / n == k % n { deg[k / n] } else { 0.0 });
    let laplacian = match kind {
        LaplacianKind::Paper => Array::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            let ia = if i == j { 1.0 } else { 0.0 } - a.at(i, j);
            ia * deg[j].sqrt() / deg[i].sqrt()
        }),
        LaplacianKind::GcnClassic => {
            let dt: Vec<f64> = deg.iter().map(|d| d + 1.0).collect();
            Array::from_fn(&[n, n], |k| {
                let (i, j) = (k / n, k % n);
                let ai = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
                ai / (dt[i] * dt[j]).sqrt()
            })
        }
        LaplacianKind::Identity => Array::eye(n),
    };
    Ok(Graph {
        adjacency: a,
        degree,
        laplacian,
        identity: kind == LaplacianKind::Identity,
    })
}

pub fn build_laplacian(adjacency: &Array) -> Result<Graph> {
    build_laplacian_with(adjacency, LaplacianKind::Paper)
}

/// Graph-free fallback: the propagation operator is `I_n`.
pub fn identity_graph(n: usize) -> Result<Graph> {
    if n == 0 {
        return Err(Error::Graph("identity graph needs at least one node".into()));
    }
    Ok(Graph {
        adjacency: Array::zeros(&[n, n]),
        degree: Array::zeros(&[n, n]),
        laplacian: Array::eye(n),
        identity: true,
    })
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n_nodes: Option<usize>,
    edges: Vec<[usize; 2]>,
}

/// Reads `{"edges": [[i, j], ...]}` (unit weights, undirected). The node
/// count comes from `"n_nodes"` when present, else `n`.
pub fn adjacency_from_json(path: &Path, n: usize) -> Result<Array> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let g: GraphJson = serde_json::from_slice(&raw)?;
    let n = g.n_nodes.unwrap_or(n);
    let mut a = Array::zeros(&[n, n]);
    for [i, j] in g.edges {
        if i >= n || j >= n || i == j {
            return Err(Error::Graph(format!("invalid edge [{i}, {j}] for {n} nodes")));
        }
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    Ok(a)
}

/// Reads an `N × N` adjacency CSV without header.
pub fn adjacency_from_csv(path: &Path) -> Result<Array> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: line + 1,
            reason: e.to_string(),
        })?;
        let row = rec
            .iter()
            .map(|c| {
                c.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line + 1,
                    reason: format!("`{c}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Graph("adjacency CSV must be N rows of N values".into()));
    }
    Array::new(&[n, n], rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn arr(n: usize, v: &[f64]) -> Array {
        Array::new(&[n, n], v.to_vec()).unwrap()
    }

    #[test]
    fn two_node_unit_graph() {
        let g = build_laplacian(&arr(2, &[0., 1., 1., 0.])).unwrap();
        assert_eq!(g.degree, Array::eye(2));
        assert_eq!(g.laplacian.data(), &[1., -1., -1., 1.]);
    }

    #[test]
    fn two_node_weighted_graph() {
        // D = diag(2, 2) commutes, so L = I − A exactly.
        let g = build_laplacian(&arr(2, &[0., 2., 2., 0.])).unwrap();
        assert_eq!(g.degree.data(), &[2., 0., 0., 2.]);
        for (x, y) in g.laplacian.data().iter().zip([1., -2., -2., 1.]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_degree_is_named() {
        let err = build_laplacian(&Array::zeros(&[3, 3])).unwrap_err();
        assert!(err.to_string().contains("node 0"), "{err}");
        let err = build_laplacian(&arr(3, &[0., 1., 0., 1., 0., 0., 0., 0., 0.])).unwrap_err();
        assert!(err.to_string().contains("node 2"), "{err}");
    }

    #[test]
    fn asymmetry_rejected_beyond_tolerance() {
        assert!(build_laplacian(&arr(2, &[0., 1., 1.1, 0.])).is_err());
        assert!(build_laplacian(&arr(2, &[0., 1., 1.0 + 1e-12, 0.])).is_ok());
    }

    #[test]
    fn identity_graphs() {
        assert_eq!(identity_graph(3).unwrap().laplacian, Array::eye(3));
        assert_eq!(identity_graph(1).unwrap().laplacian.data(), &[1.0]);
        assert!(identity_graph(0).is_err());
        assert!(identity_graph(2).unwrap().identity);
    }

    #[test]
    fn classic_operator_rows() {
        let g = build_laplacian_with(&arr(2, &[0., 1., 1., 0.]), LaplacianKind::GcnClassic).unwrap();
        assert!(g.laplacian.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    fn random_graph(rng: &mut RngStream, n: usize) -> Array {
        let mut a = Array::zeros(&[n, n]);
        for i in 0..n {
            let j = (i + 1) % n;
            let w = 0.5 + rng.uniform();
            a.set(&[i, j], w);
            a.set(&[j, i], w);
        }
        for i in 0..n {
            for j in i + 2..n {
                if rng.uniform() < 0.3 {
                    let w = rng.uniform() * 2.0;
                    a.set(&[i, j], w);
                    a.set(&[j, i], w);
                }
            }
        }
        a
    }

    #[test]
    fn spectrum_is_real() {
        let mut rng = RngStream::new(5);
        for trial in 0..20 {
            let n = 3 + trial % 5;
            let g = build_laplacian(&random_graph(&mut rng, n)).unwrap();
            let m = nalgebra::DMatrix::from_row_slice(n, n, g.laplacian.data());
            for ev in m.complex_eigenvalues().iter() {
                assert!(ev.im.abs() < 1e-8, "complex eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = RngStream::new(9);
        let a = random_graph(&mut rng, 6);
        assert_eq!(build_laplacian(&a).unwrap(), build_laplacian(&a).unwrap());
    }
}
