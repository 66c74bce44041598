//! Define-by-run tape with reverse-mode differentiation.

use crate::scalar::Scalar;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::NnError;

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SegmentSum(NodeId, Vec<usize>),
    SumRows(NodeId),
    SumAll(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    value: Matrix<T>,
}

/// Records a forward computation over the values of one [`ParamStore`].
///
/// Each parameter tensor is loaded at most once per tape.
#[derive(Debug)]
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    loaded: Vec<Option<NodeId>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Aligned with [`ParamStore::values`].
    pub params: Vec<T>,
    nodes: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded node, if the loss depends on it.
    pub fn node(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> NnError {
    NnError::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            loaded: vec![None; params.manifest().len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant. Its gradient is still reported by `backward`.
    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.loaded[id.0] {
            return node;
        }
        let value = self.params.matrix(id);
        let node = self.push(Op::Param(id), value);
        self.loaded[id.0] = Some(node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(shape_err("add_row", sa, sb));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for r in 0..sa.0 {
            for (x, &y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), value)
    }

    /// Column-wise concatenation; all parts need the same row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| NnError::Shape("concat of nothing".into()))?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat", self.shape(parts[0]), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Output row `k` is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId, NnError> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NnError::Shape(format!(
                "gather index {bad} out of {rows} rows"
            )));
        }
        let src = self.value(a);
        let value = Matrix::from_fn(index.len(), cols, |r, c| src.get(index[r], c));
        Ok(self.push(Op::GatherRows(a, index.to_vec()), value))
    }

    /// Output row `i` is the sum of the rows `k` of `a` with `segment[k] == i`.
    pub fn segment_sum(
        &mut self,
        a: NodeId,
        segment: &[usize],
        segments: usize,
    ) -> Result<NodeId, NnError> {
        let (rows, cols) = self.shape(a);
        if segment.len() != rows {
            return Err(NnError::Shape(format!(
                "segment ids for {} rows, matrix has {rows}",
                segment.len()
            )));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= segments) {
            return Err(NnError::Shape(format!(
                "segment id {bad} out of {segments}"
            )));
        }
        let mut value = Matrix::zeros(segments, cols);
        for (k, &s) in segment.iter().enumerate() {
            let src = self.value(a).row(k).to_vec();
            for (d, x) in value.row_mut(s).iter_mut().zip(src) {
                *d += x;
            }
        }
        Ok(self.push(Op::SegmentSum(a, segment.to_vec()), value))
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).sum_rows();
        self.push(Op::SumRows(a), value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::row_vector(vec![self.value(a).sum()]);
        self.push(Op::SumAll(a), value)
    }

    /// Gradient of `Σ_k <seed_k, node_k>` with respect to every parameter and node.
    ///
    /// For a scalar loss node pass a single `1 × 1` seed of one.
    pub fn backward(&self, seeds: &[(NodeId, Matrix<T>)]) -> Result<Gradients<T>, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::Usage("backward called on an empty tape".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(NnError::Usage(format!(
                    "seed node {} not on this tape",
                    id.0
                )));
            }
            if seed.shape() != self.shape(*id) {
                return Err(shape_err("seed", seed.shape(), self.shape(*id)));
            }
            accumulate(&mut grads[id.0], seed.clone());
        }
        let mut param_grads = vec![T::zero(); self.params.len()];
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let range = self.params.entry(*p).range();
                    for (d, &x) in param_grads[range].iter_mut().zip(g.as_slice()) {
                        *d += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_transpose_rhs(self.value(*b));
                    let gb = self.value(*a).transpose_matmul(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[b.0], g.sum_rows());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (d, &y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *d *= T::one() - y * y;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = Matrix::from_fn(rows, cols, |r, c| g.get(r, c0 + c));
                        accumulate(&mut grads[p.0], gp);
                        c0 += cols;
                    }
                }
                Op::GatherRows(a, index) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for (k, &src) in index.iter().enumerate() {
                        for (d, &x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSum(a, segment) => {
                    let cols = g.cols();
                    let ga = Matrix::from_fn(segment.len(), cols, |k, c| g.get(segment[k], c));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = Matrix::from_fn(rows, cols, |_, c| g.get(0, c));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    let s = g.get(0, 0);
                    accumulate(&mut grads[a.0], Matrix::from_fn(rows, cols, |_, _| s));
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            nodes: grads,
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
