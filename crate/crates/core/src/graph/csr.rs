use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Symmetric adjacency in compressed sparse row form.
///
/// Rows always contain a self-loop and neighbor lists are sorted. The cached
/// coefficients hold the GCN propagation operator `D̃^{-1/2} (A + I) D̃^{-1/2}`
/// entry by entry, aligned with `col_idx`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    norm_val: Option<Vec<f64>>,
}

impl CsrAdjacency {
    /// Builds a normalized adjacency from undirected pairs. Pairs are
    /// symmetrized and deduplicated; self pairs are ignored since every node
    /// receives exactly one self-loop.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = Self::from_edges_unnormalized(n, edges)?;
        adj.rebuild_normalization();
        Ok(adj)
    }

    pub fn from_edges_unnormalized(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = (0..n).map(|u| vec![u]).collect();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u != v {
                lists[u].push(v);
                lists[v].push(u);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut list in lists {
            list.sort_unstable();
            list.dedup();
            col_idx.extend(list);
            row_ptr.push(col_idx.len());
        }
        Ok(CsrAdjacency {
            n,
            row_ptr,
            col_idx,
            norm_val: None,
        })
    }

    /// Recomputes `1/sqrt(d̃_u d̃_v)` for every stored entry from the current
    /// degrees (self-loop included).
    pub fn rebuild_normalization(&mut self) {
        let mut vals = Vec::with_capacity(self.col_idx.len());
        for u in 0..self.n {
            let du = self.degree(u);
            for &v in self.neighbors(u) {
                vals.push(1.0 / ((du * self.degree(v)) as f64).sqrt());
            }
        }
        self.norm_val = Some(vals);
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Stored entries, self-loops included.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Undirected edges excluding self-loops.
    pub fn edge_count(&self) -> usize {
        (self.nnz() - self.n) / 2
    }

    /// Degree including the self-loop (d̃).
    pub fn degree(&self, u: usize) -> usize {
        self.row_ptr[u + 1] - self.row_ptr[u]
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn is_normalized(&self) -> bool {
        self.norm_val.is_some()
    }

    pub fn norm_values(&self) -> Result<&[f64]> {
        self.norm_val
            .as_deref()
            .ok_or_else(|| Error::State("adjacency normalization coefficients missing".into()))
    }

    /// Normalized coefficient for `(u, v)`, or `None` when the entry is absent.
    pub fn coefficient(&self, u: usize, v: usize) -> Option<f64> {
        let pos = self.neighbors(u).binary_search(&v).ok()?;
        self.norm_val.as_ref().map(|vals| vals[self.row_ptr[u] + pos])
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected non-loop edges as canonical `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    /// `Â · x`.
    pub fn spmm(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.n {
            return Err(Error::Dimension {
                op: "spmm",
                left: (self.n, self.n),
                right: x.shape(),
            });
        }
        let vals = self.norm_values()?;
        let mut out = DenseMatrix::zeros(self.n, x.cols());
        for u in 0..self.n {
            let (lo, hi) = (self.row_ptr[u], self.row_ptr[u + 1]);
            let dst = out.row_mut(u);
            for k in lo..hi {
                let w = vals[k];
                for (d, s) in dst.iter_mut().zip(x.row(self.col_idx[k])) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Dense copy of the normalized operator. Test and diagnostic use only.
    pub fn to_dense_normalized(&self) -> Result<DenseMatrix> {
        let vals = self.norm_values()?;
        let mut out = DenseMatrix::zeros(self.n, self.n);
        for u in 0..self.n {
            for k in self.row_ptr[u]..self.row_ptr[u + 1] {
                out.set(u, self.col_idx[k], vals[k]);
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|u| self.neighbors(u).iter().all(|&v| self.has_edge(v, u)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_coefficients() {
        let adj = CsrAdjacency::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(adj.coefficient(0, 1), Some(0.5));
        assert_eq!(adj.coefficient(1, 0), Some(0.5));
        assert_eq!(adj.coefficient(0, 0), Some(0.5));
        assert_eq!(adj.edge_count(), 1);
    }

    #[test]
    fn isolated_node_has_unit_self_loop() {
        let adj = CsrAdjacency::from_edges(1, []).unwrap();
        assert_eq!(adj.neighbors(0), &[0]);
        assert_eq!(adj.coefficient(0, 0), Some(1.0));
    }

    #[test]
    fn duplicates_and_reversed_pairs_collapse() {
        let a = CsrAdjacency::from_edges(3, [(0, 1), (1, 0), (0, 1), (2, 2)]).unwrap();
        let b = CsrAdjacency::from_edges(3, [(0, 1)]).unwrap();
        assert_eq!(a, b);
        assert!(a.is_symmetric());
    }

    #[test]
    fn regular_graph_coefficients() {
        // 3-cycle: every node has d̃ = 3.
        let adj = CsrAdjacency::from_edges(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        for &v in adj.norm_values().unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = adj.spmm(&DenseMatrix::ones(3, 1)).unwrap();
        for &v in y.values() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn spmm_without_normalization_is_a_state_error() {
        let adj = CsrAdjacency::from_edges_unnormalized(2, [(0, 1)]).unwrap();
        assert!(matches!(
            adj.spmm(&DenseMatrix::ones(2, 1)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(CsrAdjacency::from_edges(2, [(0, 2)]).is_err());
    }
}
