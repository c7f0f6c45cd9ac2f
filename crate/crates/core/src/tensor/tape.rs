use std::sync::Arc;

use super::matrix::{gemm, DenseMatrix};
use crate::error::{Error, Result};
use crate::graph::CsrAdjacency;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul,
    SpMM(Arc<CsrAdjacency>),
    Mul,
    Add,
    Scale(f64),
    Relu,
    LeakyRelu(f64),
    Exp,
    LogSoftmax,
    /// Row-wise log-softmax over the entries whose include flag is nonzero;
    /// excluded entries produce 0 and receive no gradient.
    MaskedLogSoftmax(Arc<DenseMatrix>),
    GradReverse(f64),
    SumAll,
    MeanAll,
    RowSum,
    ConcatCols,
    GatherRows(Arc<Vec<usize>>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::SpMM(_) => "spmm",
            Op::Mul => "mul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Exp => "exp",
            Op::LogSoftmax => "log_softmax",
            Op::MaskedLogSoftmax(_) => "masked_log_softmax",
            Op::GradReverse(_) => "grad_reverse",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::RowSum => "row_sum",
            Op::ConcatCols => "concat_cols",
            Op::GatherRows(_) => "gather_rows",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValueNode {
    pub id: NodeId,
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

/// Reverse-mode differentiation record. Nodes are appended in evaluation
/// order, so every parent id is strictly less than its child's id.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<ValueNode>,
    differentiated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &ValueNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].grad
    }

    pub fn nodes(&self) -> &[ValueNode] {
        &self.nodes
    }

    /// Whether [`Tape::backward`] has populated gradients.
    pub fn has_gradients(&self) -> bool {
        self.differentiated
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: DenseMatrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        let (r, c) = value.shape();
        self.nodes.push(ValueNode {
            id,
            op,
            parents,
            value,
            grad: DenseMatrix::zeros(r, c),
        });
        id
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    pub fn spmm(&mut self, adj: &Arc<CsrAdjacency>, x: NodeId) -> Result<NodeId> {
        let value = adj.spmm(self.value(x))?;
        Ok(self.push(Op::SpMM(Arc::clone(adj)), vec![x], value))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn non_empty(&self, op: &'static str, a: NodeId) -> Result<()> {
        if self.value(a).is_empty() {
            return Err(Error::Shape(format!("{op} applied to an empty matrix")));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("elementwise_mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], value)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(slope), vec![a], value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], value)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.non_empty("log_softmax", a)?;
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(Op::LogSoftmax, vec![a], out))
    }

    /// Log-softmax restricted per row to entries where `include` is nonzero.
    /// Every row must include at least one entry.
    pub fn masked_log_softmax_rows(&mut self, a: NodeId, include: DenseMatrix) -> Result<NodeId> {
        self.non_empty("masked_log_softmax", a)?;
        let x = self.value(a);
        if include.shape() != x.shape() {
            return Err(Error::Dimension {
                op: "masked_log_softmax",
                left: x.shape(),
                right: include.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (row, keep) = (x.row(r), include.row(r));
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Shape(format!(
                    "masked_log_softmax row {r} excludes every entry"
                )));
            }
            let sum: f64 = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k != 0.0)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + sum.ln();
            for ((o, &v), &k) in out.row_mut(r).iter_mut().zip(row).zip(keep) {
                if k != 0.0 {
                    *o = v - lse;
                }
            }
        }
        Ok(self.push(Op::MaskedLogSoftmax(Arc::new(include)), vec![a], out))
    }

    /// Identity forward; the backward pass multiplies the incoming gradient
    /// by `-scale`.
    pub fn grad_reverse(&mut self, a: NodeId, scale: f64) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::GradReverse(scale), vec![a], value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.push(Op::SumAll, vec![a], value)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.non_empty("mean", a)?;
        let x = self.value(a);
        let value = DenseMatrix::scalar(x.sum() / x.len() as f64);
        Ok(self.push(Op::MeanAll, vec![a], value))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = DenseMatrix::from_vec(x.rows(), 1, data).expect("row_sum shape");
        self.push(Op::RowSum, vec![a], value)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let value = DenseMatrix::from_vec(x.rows(), cols, data)?;
        Ok(self.push(Op::ConcatCols, vec![a, b], value))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let value = x.select_rows(&idx);
        Ok(self.push(Op::GatherRows(idx), vec![a], value))
    }

    /// Reverse accumulation from a scalar loss. Gradients are reset first, so
    /// calling twice yields identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Shape(format!(
                "backward requires a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        for node in &mut self.nodes {
            node.grad.values_mut().fill(0.0);
        }
        let mut reached = vec![false; self.nodes.len()];
        reached[loss.0] = true;
        self.nodes[loss.0].grad.values_mut()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !reached[id] {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            for p in &node.parents {
                reached[p.0] = true;
            }
            propagate(node, before);
        }
        self.differentiated = true;
        Ok(())
    }

    /// `(input value, output gradient)` for every propagation through `adj`,
    /// in tape order. Used to differentiate the loss with respect to the
    /// adjacency entries after [`Tape::backward`].
    pub fn spmm_terms(&self, adj: &Arc<CsrAdjacency>) -> Vec<(&DenseMatrix, &DenseMatrix)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::SpMM(a) if Arc::ptr_eq(a, adj) => {
                    Some((&self.nodes[n.parents[0].0].value, &n.grad))
                }
                _ => None,
            })
            .collect()
    }
}

fn propagate(node: &ValueNode, before: &mut [ValueNode]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (node.parents[0].0, node.parents[1].0);
            // ∂a += g·bᵀ, ∂b += aᵀ·g
            let mut ga = std::mem::replace(&mut before[a].grad, DenseMatrix::zeros(0, 0));
            gemm(false, g, true, &before[b].value, &mut ga);
            before[a].grad = ga;
            let mut gb = std::mem::replace(&mut before[b].grad, DenseMatrix::zeros(0, 0));
            gemm(true, &before[a].value, false, g, &mut gb);
            before[b].grad = gb;
        }
        Op::SpMM(adj) => {
            let x = node.parents[0].0;
            // Â is symmetric, so Âᵀ·g = Â·g.
            let back = adj.spmm(g).expect("spmm backward on validated shapes");
            before[x].grad.add_assign(&back);
        }
        Op::Mul => {
            let (a, b) = (node.parents[0].0, node.parents[1].0);
            let ga = g.zip_map(&before[b].value, |g, y| g * y);
            let gb = g.zip_map(&before[a].value, |g, x| g * x);
            before[a].grad.add_assign(&ga);
            before[b].grad.add_assign(&gb);
        }
        Op::Add => {
            before[node.parents[0].0].grad.add_assign(g);
            before[node.parents[1].0].grad.add_assign(g);
        }
        Op::Scale(c) => before[node.parents[0].0].grad.axpy(*c, g),
        Op::Relu => {
            let a = node.parents[0].0;
            let ga = g.zip_map(&before[a].value, |g, x| if x > 0.0 { g } else { 0.0 });
            before[a].grad.add_assign(&ga);
        }
        Op::LeakyRelu(slope) => {
            let a = node.parents[0].0;
            let ga = g.zip_map(&before[a].value, |g, x| if x > 0.0 { g } else { slope * g });
            before[a].grad.add_assign(&ga);
        }
        Op::Exp => {
            let a = node.parents[0].0;
            let ga = g.zip_map(&node.value, |g, y| g * y);
            before[a].grad.add_assign(&ga);
        }
        Op::LogSoftmax => {
            let a = node.parents[0].0;
            let y = &node.value;
            let target = &mut before[a].grad;
            for r in 0..y.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for ((t, &gi), &yi) in target.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *t += gi - yi.exp() * gsum;
                }
            }
        }
        Op::MaskedLogSoftmax(include) => {
            let a = node.parents[0].0;
            let y = &node.value;
            let target = &mut before[a].grad;
            for r in 0..y.rows() {
                let keep = include.row(r);
                let gsum: f64 = g
                    .row(r)
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k != 0.0)
                    .map(|(&gi, _)| gi)
                    .sum();
                for (((t, &gi), &yi), &k) in target
                    .row_mut(r)
                    .iter_mut()
                    .zip(g.row(r))
                    .zip(y.row(r))
                    .zip(keep)
                {
                    if k != 0.0 {
                        *t += gi - yi.exp() * gsum;
                    }
                }
            }
        }
        Op::GradReverse(scale) => before[node.parents[0].0].grad.axpy(-scale, g),
        Op::SumAll => {
            let a = node.parents[0].0;
            let s = g.item();
            for t in before[a].grad.values_mut() {
                *t += s;
            }
        }
        Op::MeanAll => {
            let a = node.parents[0].0;
            let s = g.item() / before[a].value.len() as f64;
            for t in before[a].grad.values_mut() {
                *t += s;
            }
        }
        Op::RowSum => {
            let a = node.parents[0].0;
            let target = &mut before[a].grad;
            for r in 0..target.rows() {
                let s = g.get(r, 0);
                for t in target.row_mut(r) {
                    *t += s;
                }
            }
        }
        Op::ConcatCols => {
            let (a, b) = (node.parents[0].0, node.parents[1].0);
            let ca = before[a].value.cols();
            for r in 0..g.rows() {
                let row = g.row(r);
                for (t, s) in before[a].grad.row_mut(r).iter_mut().zip(&row[..ca]) {
                    *t += s;
                }
                for (t, s) in before[b].grad.row_mut(r).iter_mut().zip(&row[ca..]) {
                    *t += s;
                }
            }
        }
        Op::GatherRows(idx) => {
            let a = node.parents[0].0;
            for (r, &src) in idx.iter().enumerate() {
                for (t, s) in before[a].grad.row_mut(src).iter_mut().zip(g.row(r)) {
                    *t += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.leaf(DenseMatrix::identity(2));
        let b = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn annihilating_matmul() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
        let b = t.leaf(DenseMatrix::from_rows(&[[0.0], [5.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &DenseMatrix::from_rows(&[[0.0], [0.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::zeros(2, 3));
        let b = t.leaf(DenseMatrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn elementwise_masking() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0]]));
        let m = t.leaf(DenseMatrix::from_rows(&[[0.0, 1.0]]));
        let y = t.mul(a, m).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 2.0]);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).values(), &[0.0, 1.0]);
        assert_eq!(t.grad(m).values(), &[1.0, 2.0]);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::from_rows(&[[0.3, -1.7], [2.5, 0.0]]));
        let m = t.leaf(DenseMatrix::ones(2, 2));
        let y = t.mul(a, m).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.value(y), t.value(a));
        assert_eq!(t.grad(a), &DenseMatrix::ones(2, 2));
    }

    #[test]
    fn relu_and_log_softmax_examples() {
        let mut t = Tape::new();
        let a = t.leaf(DenseMatrix::from_rows(&[[-1.0, 2.0]]));
        let r = t.relu(a);
        assert_eq!(t.value(r).values(), &[0.0, 2.0]);

        let z = t.leaf(DenseMatrix::zeros(1, 3));
        let ls = t.log_softmax_rows(z).unwrap();
        for &v in t.value(ls).values() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_rejects_empty() {
        let mut t = Tape::new();
        let z = t.leaf(DenseMatrix::zeros(2, 0));
        assert!(t.log_softmax_rows(z).is_err());
    }

    #[test]
    fn grad_reverse_negates() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0]]));
        let r = t.grad_reverse(x, 1.0);
        assert_eq!(t.value(r), t.value(x));
        let w = t.leaf(DenseMatrix::from_rows(&[[3.0, -4.0]]));
        let y = t.mul(r, w).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).values(), &[-3.0, 4.0]);

        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0]]));
        let r = t.grad_reverse(x, 0.0);
        let s = t.sum_all(r);
        t.backward(s).unwrap();
        assert!(t.grad(x).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[1.5, -2.0], [0.0, 4.0]]));
        let y = t.add(x, x).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &DenseMatrix::filled(2, 2, 2.0));
    }

    #[test]
    fn sum_gradient_is_ones_and_unreachable_stays_zero() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0, 3.0]]));
        let unrelated = t.leaf(DenseMatrix::ones(2, 2));
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &DenseMatrix::ones(1, 3));
        assert_eq!(t.grad(unrelated), &DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::ones(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_log_softmax_skips_excluded() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[2.0, 0.0, 0.0, 1.0]]));
        let keep = DenseMatrix::from_rows(&[[0.0, 1.0, 1.0, 1.0]]);
        let ls = t.masked_log_softmax_rows(x, keep).unwrap();
        let expected = 1.0 - (2.0 + 1f64.exp()).ln();
        assert!((t.value(ls).get(0, 3) - expected).abs() < 1e-12);
        assert_eq!(t.value(ls).get(0, 0), 0.0);
        let s = t.sum_all(ls);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).get(0, 0), 0.0);
    }
}
