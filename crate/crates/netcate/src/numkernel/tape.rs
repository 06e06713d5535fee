use std::rc::Rc;

use ndarray::Axis;

use super::{CsrMatrix, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Recip(NodeId),
    MatMul(NodeId, NodeId),
    Spmm(Rc<CsrMatrix>, NodeId),
    Transpose(NodeId),
    Elu(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    MaxZero(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSums(NodeId),
    AddRowBroadcast(NodeId, NodeId),
    OuterSum(NodeId, NodeId),
    ScaleByScalar(NodeId, NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    ScatterRows(Vec<(NodeId, Rc<Vec<usize>>)>),
    ConcatRows(Vec<NodeId>),
    StrictUpper(NodeId),
    // Median keeps the flat row-major indices of the one or two entries that
    // realize the median so backward can route gradient through them.
    Median(NodeId, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape over dense matrices.
///
/// Operations evaluate eagerly and append a node; inputs always carry a
/// smaller [`NodeId`] than their result, so one reverse sweep visits nodes in
/// exact anti-chronological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; `backward` accumulates its gradient.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[[0, 0]]
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul_elem shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::MulElem(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        let rg = self.needs(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.needs(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let rg = self.needs(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul dimension mismatch: {ar}x{ac} vs {br}x{bc}");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// Sparse-dense product with a constant sparse left operand.
    pub fn spmm(&mut self, a: Rc<CsrMatrix>, b: NodeId) -> NodeId {
        let v = a.matmul_dense(&self.nodes[b.0].value.view());
        let rg = self.needs(b);
        self.push(v, Op::Spmm(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.t().as_standard_layout().into_owned();
        let rg = self.needs(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(super::elu_scalar);
        let rg = self.needs(a);
        self.push(v, Op::Elu(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.needs(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// Entrywise square root. Inputs must be non-negative; compose with
    /// [`Self::max_zero`] first when rounding can produce small negatives.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.needs(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn max_zero(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.needs(a);
        self.push(v, Op::MaxZero(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let rg = self.needs(a);
        self.push(Matrix::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "mean of empty matrix");
        let s = self.nodes[a.0].value.sum() / n as f64;
        let rg = self.needs(a);
        self.push(Matrix::from_elem((1, 1), s), Op::Mean(a), rg)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.needs(a);
        self.push(v, Op::RowSums(a), rg)
    }

    /// x + b with b a 1×m row vector broadcast over the rows of x.
    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (_, xc) = self.shape(x);
        let (br, bc) = self.shape(b);
        assert_eq!((br, bc), (1, xc), "bias must be a 1x{xc} row vector");
        let v = &self.nodes[x.0].value + &self.nodes[b.0].value;
        let rg = self.needs(x) || self.needs(b);
        self.push(v, Op::AddRowBroadcast(x, b), rg)
    }

    /// out[i, j] = col[i, 0] + row[0, j].
    pub fn outer_sum(&mut self, col: NodeId, row: NodeId) -> NodeId {
        let (n, c1) = self.shape(col);
        let (r1, m) = self.shape(row);
        assert_eq!(c1, 1, "outer_sum col operand must be n x 1");
        assert_eq!(r1, 1, "outer_sum row operand must be 1 x m");
        let cv = &self.nodes[col.0].value;
        let rv = &self.nodes[row.0].value;
        let v = Matrix::from_shape_fn((n, m), |(i, j)| cv[[i, 0]] + rv[[0, j]]);
        let rg = self.needs(col) || self.needs(row);
        self.push(v, Op::OuterSum(col, row), rg)
    }

    /// x scaled by a differentiable 1×1 scalar node.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "scale operand must be 1x1");
        let sv = self.nodes[s.0].value[[0, 0]];
        let v = self.nodes[x.0].value.mapv(|e| e * sv);
        let rg = self.needs(x) || self.needs(s);
        self.push(v, Op::ScaleByScalar(x, s), rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let (n, m) = self.shape(x);
        assert!(idx.iter().all(|&i| i < n), "gather index out of range");
        let xv = &self.nodes[x.0].value;
        let mut v = Matrix::zeros((idx.len(), m));
        for (t, &i) in idx.iter().enumerate() {
            v.row_mut(t).assign(&xv.row(i));
        }
        let rg = self.needs(x);
        self.push(v, Op::GatherRows(x, idx), rg)
    }

    /// Builds an `out_rows`-row matrix from several sources, adding row t of a
    /// source into output row idx[t]. Rows no source touches stay zero.
    pub fn scatter_rows(
        &mut self,
        sources: Vec<(NodeId, Rc<Vec<usize>>)>,
        out_rows: usize,
    ) -> NodeId {
        assert!(!sources.is_empty(), "scatter needs at least one source");
        let m = self.shape(sources[0].0).1;
        let mut v = Matrix::zeros((out_rows, m));
        let mut rg = false;
        for (src, idx) in &sources {
            let (sr, sc) = self.shape(*src);
            assert_eq!(sc, m, "scatter sources must share a column count");
            assert_eq!(sr, idx.len(), "scatter index count must match rows");
            assert!(idx.iter().all(|&i| i < out_rows), "scatter index range");
            let sv = &self.nodes[src.0].value;
            for (t, &dest) in idx.iter().enumerate() {
                v.row_mut(dest).scaled_add(1.0, &sv.row(t));
            }
            rg = rg || self.needs(*src);
        }
        self.push(v, Op::ScatterRows(sources), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of no parts");
        let m = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Matrix::zeros((total, m));
        let mut at = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pc, m, "concat parts must share a column count");
            v.slice_mut(ndarray::s![at..at + pr, ..])
                .assign(&self.nodes[p.0].value);
            at += pr;
            rg = rg || self.needs(p);
        }
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Entries strictly above the diagonal of a square matrix, row-major, as a
    /// column vector of length n(n−1)/2.
    pub fn strict_upper(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.shape(a);
        assert_eq!(n, m, "strict_upper needs a square matrix");
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(av[[i, j]]);
            }
        }
        let len = out.len();
        let v = Matrix::from_shape_vec((len, 1), out).expect("column shape");
        let rg = self.needs(a);
        self.push(v, Op::StrictUpper(a), rg)
    }

    /// Median over all entries, differentiable through the realizing entries
    /// (both middle entries for even counts).
    pub fn median(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let n = av.len();
        assert!(n > 0, "median of empty matrix");
        let cols = av.dim().1;
        let mut order: Vec<(f64, usize)> = av
            .indexed_iter()
            .map(|((i, j), &v)| (v, i * cols + j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (value, lo, hi) = if n % 2 == 1 {
            let (v, k) = order[n / 2];
            (v, k, k)
        } else {
            let (vl, kl) = order[n / 2 - 1];
            let (vh, kh) = order[n / 2];
            (0.5 * (vl + vh), kl, kh)
        };
        let rg = self.needs(a);
        self.push(Matrix::from_elem((1, 1), value), Op::Median(a, lo, hi), rg)
    }

    /// xW + b with b broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }

    /// Gradients of a recorded 1×1 output with respect to every node that
    /// requires them.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        assert!(output.0 < self.nodes.len(), "output not recorded here");
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let out_val = self.nodes[output.0].value[[0, 0]];
        if !out_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {out_val}"
            )));
        }

        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=output.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_ref().expect("grad present").clone();
            let mut acc = |id: NodeId, delta: Matrix| {
                debug_assert!(id.0 < i, "input recorded after its consumer");
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut lo[id.0] {
                    Some(m) => *m += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.mapv(|x| -x));
                }
                Op::MulElem(a, b) => {
                    acc(*a, &g * &self.nodes[b.0].value);
                    acc(*b, &g * &self.nodes[a.0].value);
                }
                Op::Scale(a, c) => acc(*a, g.mapv(|x| c * x)),
                Op::AddConst(a) => acc(*a, g),
                Op::Recip(a) => {
                    let out = &self.nodes[i].value;
                    acc(*a, -(&g * out) * out);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    acc(*a, g.dot(&bv.t()));
                    acc(*b, av.t().dot(&g));
                }
                Op::Spmm(s, b) => acc(*b, s.transpose_matmul_dense(&g.view())),
                Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
                Op::Elu(a) => {
                    let d = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > 0.0 { 1.0 } else { x.exp() });
                    acc(*a, &g * &d);
                }
                Op::Exp(a) => acc(*a, &g * &self.nodes[i].value),
                Op::Sqrt(a) => {
                    let out = &self.nodes[i].value;
                    let mut d = g.clone();
                    d.zip_mut_with(out, |gi, &o| *gi = if o > 0.0 { 0.5 * *gi / o } else { 0.0 });
                    acc(*a, d);
                }
                Op::MaxZero(a) => {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[a.0].value, |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(*a, Matrix::from_elem(self.nodes[a.0].value.dim(), s));
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let s = g[[0, 0]] / n;
                    acc(*a, Matrix::from_elem(self.nodes[a.0].value.dim(), s));
                }
                Op::RowSums(a) => {
                    let (n, m) = self.nodes[a.0].value.dim();
                    let d = Matrix::from_shape_fn((n, m), |(r, _)| g[[r, 0]]);
                    acc(*a, d);
                }
                Op::AddRowBroadcast(x, b) => {
                    acc(*x, g.clone());
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::OuterSum(c, r) => {
                    acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::ScaleByScalar(x, s) => {
                    let sv = self.nodes[s.0].value[[0, 0]];
                    acc(*x, g.mapv(|e| e * sv));
                    let dot = (&g * &self.nodes[x.0].value).sum();
                    acc(*s, Matrix::from_elem((1, 1), dot));
                }
                Op::GatherRows(x, idx) => {
                    let mut d = Matrix::zeros(self.nodes[x.0].value.dim());
                    for (t, &src) in idx.iter().enumerate() {
                        d.row_mut(src).scaled_add(1.0, &g.row(t));
                    }
                    acc(*x, d);
                }
                Op::ScatterRows(sources) => {
                    for (src, idx) in sources.clone() {
                        let m = self.nodes[src.0].value.dim();
                        let mut d = Matrix::zeros(m);
                        for (t, &dest) in idx.iter().enumerate() {
                            d.row_mut(t).assign(&g.row(dest));
                        }
                        acc(src, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts.clone() {
                        let rows = self.nodes[p.0].value.dim().0;
                        let d = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        at += rows;
                        acc(p, d);
                    }
                }
                Op::StrictUpper(a) => {
                    let n = self.nodes[a.0].value.dim().0;
                    let mut d = Matrix::zeros((n, n));
                    let mut k = 0;
                    for r in 0..n {
                        for c in r + 1..n {
                            d[[r, c]] = g[[k, 0]];
                            k += 1;
                        }
                    }
                    acc(*a, d);
                }
                Op::Median(a, klo, khi) => {
                    let (n, m) = self.nodes[a.0].value.dim();
                    let mut d = Matrix::zeros((n, m));
                    let gv = g[[0, 0]];
                    if klo == khi {
                        d[[klo / m, klo % m]] = gv;
                    } else {
                        d[[klo / m, klo % m]] = 0.5 * gv;
                        d[[khi / m, khi % m]] = 0.5 * gv;
                    }
                    acc(*a, d);
                }
            }
        }

        for (i, slot) in grads.iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                if let Some(m) = slot {
                    if m.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "gradient of parameter node {i} is not finite"
                        )));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep, indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.index()).and_then(|g| g.take())
    }
}
