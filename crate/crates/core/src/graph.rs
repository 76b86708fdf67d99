//! Reverse-mode automatic differentiation over dynamic-dimension f64 arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes; every operator
//! appends a node whose parents are earlier nodes, so tape order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep. All
//! encoder, fusion, and loss computations in this crate are built from these
//! primitives, which is what makes the finite-difference gradient checks in
//! the test suite meaningful: they validate compositions, not hand-derived
//! special cases.
//!
//! Scalars are represented as 0-dimensional arrays. Elementwise binary ops
//! accept either two arrays of identical shape or one array and one scalar.

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on a [`Tape`].
pub type Var = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowVec(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Dot(Var, Var),
    Kron(Var, Var),
    OuterSum(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    SortedMeanAxis0(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    CrossEntropy(Var, Vec<usize>),
    Conv2d { input: Var, kernel: Var, bias: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of one scalar output with respect to every tape node.
///
/// Nodes the output does not depend on hold `None`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the root does not depend on it.
    pub fn get(&self, id: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, defaulting to zeros of the given shape.
    pub fn get_or_zeros(&self, id: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

fn scalar_of(a: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(a.len(), 1);
    *a.first().expect("scalar node is empty")
}

fn is_scalar(a: &ArrayD<f64>) -> bool {
    a.ndim() == 0
}

/// Records a computation graph and runs reverse-mode differentiation over it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Current value of a node.
    pub fn value(&self, id: Var) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a 0-d node as a plain f64.
    pub fn scalar_value(&self, id: Var) -> f64 {
        scalar_of(&self.nodes[id].value)
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Register an input or parameter array.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a 0-d scalar leaf.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = ew_binary(self.value(a), self.value(b), "add", |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = ew_binary(self.value(a), self.value(b), "sub", |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = ew_binary(self.value(a), self.value(b), "mul", |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise division; the divisor may be a 0-d scalar.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = ew_binary(self.value(a), self.value(b), "div", |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    /// Broadcast a 1-D vector across the rows of a 2-D array:
    /// `out[i,j] = a[i,j] + v[j]`.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Var {
        let av = as2(self.value(a), "add_row_vec lhs");
        let vv = as1(self.value(v), "add_row_vec rhs");
        assert_eq!(av.ncols(), vv.len(), "add_row_vec width mismatch");
        let value = (&av + &vv).into_dyn();
        self.push(value, Op::AddRowVec(a, v))
    }

    /// 2-D matrix product `(m,k) @ (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a), "matmul lhs");
        let bv = as2(self.value(b), "matmul rhs");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims differ");
        let value = av.dot(&bv).into_dyn();
        self.push(value, Op::MatMul(a, b))
    }

    /// Matrix-vector product `(m,k) @ (k)`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Var {
        let av = as2(self.value(a), "matvec lhs");
        let xv = as1(self.value(x), "matvec rhs");
        assert_eq!(av.ncols(), xv.len(), "matvec inner dims differ");
        let value = av.dot(&xv).into_dyn();
        self.push(value, Op::MatVec(a, x))
    }

    /// Vector-matrix product `(k) @ (k,n)`.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Var {
        let xv = as1(self.value(x), "vecmat lhs");
        let av = as2(self.value(a), "vecmat rhs");
        assert_eq!(xv.len(), av.nrows(), "vecmat inner dims differ");
        let value = xv.dot(&av).into_dyn();
        self.push(value, Op::VecMat(x, a))
    }

    /// Inner product of two 1-D vectors, producing a 0-d scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = as1(self.value(a), "dot lhs");
        let bv = as1(self.value(b), "dot rhs");
        assert_eq!(av.len(), bv.len(), "dot length mismatch");
        let value = ArrayD::from_elem(IxDyn(&[]), av.dot(&bv));
        self.push(value, Op::Dot(a, b))
    }

    /// Flattened outer product of two 1-D vectors: `out[i*nb + j] = a[i] * b[j]`.
    ///
    /// The first operand's index varies slowest, so iterating `kron` across a
    /// list of vectors yields the row-major flattening of their outer product.
    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let av = as1(self.value(a), "kron lhs");
        let bv = as1(self.value(b), "kron rhs");
        let (na, nb) = (av.len(), bv.len());
        let mut out = Vec::with_capacity(na * nb);
        for i in 0..na {
            for j in 0..nb {
                out.push(av[i] * bv[j]);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[na * nb]), out).unwrap();
        self.push(value, Op::Kron(a, b))
    }

    /// Broadcast sum `(m) + (n) -> (m,n)` with `out[i,j] = a[i] + b[j]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Var {
        let av = as1(self.value(a), "outer_sum lhs");
        let bv = as1(self.value(b), "outer_sum rhs");
        let (m, n) = (av.len(), bv.len());
        let mut out = ArrayD::zeros(IxDyn(&[m, n]));
        for i in 0..m {
            for j in 0..n {
                out[[i, j]] = av[i] + bv[j];
            }
        }
        self.push(out, Op::OuterSum(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        self.push(value, Op::Mean(a))
    }

    /// Mean along one axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(axis))
            .expect("mean_axis on empty axis");
        self.push(value, Op::MeanAxis(a, axis))
    }

    /// Mean over axis 0 of a 2-D array with a canonical (sorted) summation
    /// order per column, so the result is bit-identical under any permutation
    /// of the rows. Used by set encoders to make pooling exactly
    /// permutation-invariant.
    pub fn sorted_mean_axis0(&mut self, a: Var) -> Var {
        let av = as2(self.value(a), "sorted_mean_axis0");
        let (n, d) = (av.nrows(), av.ncols());
        assert!(n > 0, "sorted_mean_axis0 over empty axis");
        let mut out = ArrayD::zeros(IxDyn(&[d]));
        let mut col = Vec::with_capacity(n);
        for j in 0..d {
            col.clear();
            col.extend((0..n).map(|i| av[[i, j]]));
            col.sort_by(f64::total_cmp);
            out[[j]] = col.iter().sum::<f64>() / n as f64;
        }
        self.push(out, Op::SortedMeanAxis0(a))
    }

    /// Numerically stable softmax along the last axis (1-D or 2-D input).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_value(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Concatenation of 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero vectors");
        let mut out = Vec::new();
        for &p in parts {
            let v = as1(self.value(p), "concat part");
            out.extend(v.iter().copied());
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[out.len()]), out).unwrap();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Concatenation of 2-D arrays along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of zero arrays");
        let rows = as2(self.value(parts[0]), "concat_cols part").nrows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                let v = as2(self.value(p), "concat_cols part");
                assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
                v.ncols()
            })
            .sum();
        let mut out = ArrayD::zeros(IxDyn(&[rows, total]));
        let mut off = 0;
        for &p in parts {
            let v = as2(self.value(p), "concat_cols part");
            for i in 0..rows {
                for j in 0..v.ncols() {
                    out[[i, off + j]] = v[[i, j]];
                }
            }
            off += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `i` of a 2-D array as a 1-D vector.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let av = as2(self.value(a), "row");
        let value = av.row(i).to_owned().into_dyn();
        self.push(value, Op::Row(a, i))
    }

    /// Stack 1-D vectors of equal length into a 2-D array, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of zero vectors");
        let d = as1(self.value(rows[0]), "stack_rows part").len();
        let mut out = ArrayD::zeros(IxDyn(&[rows.len(), d]));
        for (i, &r) in rows.iter().enumerate() {
            let v = as1(self.value(r), "stack_rows part");
            assert_eq!(v.len(), d, "stack_rows length mismatch");
            for j in 0..d {
                out[[i, j]] = v[j];
            }
        }
        self.push(out, Op::StackRows(rows.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reshaped(self.value(a), IxDyn(shape));
        self.push(value, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = as2(self.value(a), "transpose");
        let value = av.t().to_owned().into_dyn();
        self.push(value, Op::Transpose(a))
    }

    /// Mean cross-entropy of `(batch, classes)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = as2(self.value(logits), "cross_entropy logits");
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy batch mismatch");
        let probs = softmax_value(self.value(logits));
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < lv.ncols(), "cross_entropy target out of range");
            total -= probs[[i, t]].max(1e-300).ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / targets.len() as f64);
        self.push(value, Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Valid (no padding), stride-1 2-D convolution on channels-last data.
    ///
    /// `input` is `(H, W, Cin)`, `kernel` is `(kh, kw, Cin, Cout)`, `bias` is
    /// `(Cout)`; the output is `(H-kh+1, W-kw+1, Cout)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = as1(self.value(bias), "conv2d bias");
        assert_eq!(x.ndim(), 3, "conv2d input must be (H,W,C)");
        assert_eq!(k.ndim(), 4, "conv2d kernel must be (kh,kw,Cin,Cout)");
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, kcin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        assert_eq!(b.len(), cout, "conv2d bias length mismatch");
        assert!(h >= kh && w >= kw, "conv2d kernel larger than input");
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = ArrayD::zeros(IxDyn(&[oh, ow, cout]));
        for p in 0..oh {
            for q in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dh in 0..kh {
                        for dw in 0..kw {
                            for ci in 0..cin {
                                acc += x[[p + dh, q + dw, ci]] * k[[dh, dw, ci, co]];
                            }
                        }
                    }
                    out[[p, q, co]] = acc;
                }
            }
        }
        self.push(out, Op::Conv2d { input, kernel, bias })
    }

    /// Reverse sweep from a 0-d scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(
            is_scalar(self.value(root)),
            "backward root must be a 0-d scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: Var, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let val = |v: Var| &self.nodes[v].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum_broadcast(grads, *a, g, val(*a));
                accum_broadcast(grads, *b, g, val(*b));
            }
            Op::Sub(a, b) => {
                accum_broadcast(grads, *a, g, val(*a));
                let neg = g.mapv(|x| -x);
                accum_broadcast(grads, *b, &neg, val(*b));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = ew_binary(g, bv, "mul-grad", |x, y| x * y);
                accum_broadcast(grads, *a, &da, av);
                let db = ew_binary(g, av, "mul-grad", |x, y| x * y);
                accum_broadcast(grads, *b, &db, bv);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = ew_binary(g, bv, "div-grad", |x, y| x / y);
                accum_broadcast(grads, *a, &da, av);
                let num = ew_binary(g, av, "div-grad", |x, y| x * y);
                let bb = ew_binary(bv, bv, "div-grad", |x, y| x * y);
                let db = ew_binary(&num, &bb, "div-grad", |x, y| -x / y);
                accum_broadcast(grads, *b, &db, bv);
            }
            Op::Neg(a) => accum(grads, *a, &g.mapv(|x| -x)),
            Op::Scale(a, c) => accum(grads, *a, &g.mapv(|x| c * x)),
            Op::AddConst(a) => accum(grads, *a, g),
            Op::AddRowVec(a, v) => {
                let gv = as2(g, "add_row_vec grad");
                accum(grads, *a, g);
                accum(grads, *v, &gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::MatMul(a, b) => {
                let gv = as2(g, "matmul grad");
                let av = as2(val(*a), "matmul lhs");
                let bv = as2(val(*b), "matmul rhs");
                accum(grads, *a, &gv.dot(&bv.t()).into_dyn());
                accum(grads, *b, &av.t().dot(&gv).into_dyn());
            }
            Op::MatVec(a, x) => {
                let gv = as1(g, "matvec grad");
                let av = as2(val(*a), "matvec lhs");
                let xv = as1(val(*x), "matvec rhs");
                let mut da = ArrayD::zeros(IxDyn(&[av.nrows(), av.ncols()]));
                for i in 0..av.nrows() {
                    for j in 0..av.ncols() {
                        da[[i, j]] = gv[i] * xv[j];
                    }
                }
                accum(grads, *a, &da);
                accum(grads, *x, &av.t().dot(&gv).into_dyn());
            }
            Op::VecMat(x, a) => {
                let gv = as1(g, "vecmat grad");
                let xv = as1(val(*x), "vecmat lhs");
                let av = as2(val(*a), "vecmat rhs");
                accum(grads, *x, &av.dot(&gv).into_dyn());
                let mut da = ArrayD::zeros(IxDyn(&[av.nrows(), av.ncols()]));
                for i in 0..av.nrows() {
                    for j in 0..av.ncols() {
                        da[[i, j]] = xv[i] * gv[j];
                    }
                }
                accum(grads, *a, &da);
            }
            Op::Dot(a, b) => {
                let gs = scalar_of(g);
                accum(grads, *a, &val(*b).mapv(|x| gs * x));
                accum(grads, *b, &val(*a).mapv(|x| gs * x));
            }
            Op::Kron(a, b) => {
                let av = as1(val(*a), "kron lhs");
                let bv = as1(val(*b), "kron rhs");
                let gv = as1(g, "kron grad");
                let (na, nb) = (av.len(), bv.len());
                let mut da = ArrayD::zeros(IxDyn(&[na]));
                let mut db = ArrayD::zeros(IxDyn(&[nb]));
                for i in 0..na {
                    for j in 0..nb {
                        let ge = gv[i * nb + j];
                        da[[i]] += ge * bv[j];
                        db[[j]] += ge * av[i];
                    }
                }
                accum(grads, *a, &da);
                accum(grads, *b, &db);
            }
            Op::OuterSum(a, b) => {
                let gv = as2(g, "outer_sum grad");
                accum(grads, *a, &gv.sum_axis(Axis(1)).into_dyn());
                accum(grads, *b, &gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let da = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&ge, &ye| ge * ye * (1.0 - ye));
                accum(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let da = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&ge, &ye| ge * (1.0 - ye * ye));
                accum(grads, *a, &da);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let da = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&ge, &xe| if xe > 0.0 { ge } else { 0.0 });
                accum(grads, *a, &da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let da = ndarray::Zip::from(g).and(y).map_collect(|&ge, &ye| ge * ye);
                accum(grads, *a, &da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let da = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&ge, &ye| ge / (2.0 * ye));
                accum(grads, *a, &da);
            }
            Op::Sum(a) => {
                let gs = scalar_of(g);
                accum(grads, *a, &ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::Mean(a) => {
                let gs = scalar_of(g) / val(*a).len() as f64;
                accum(grads, *a, &ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::MeanAxis(a, axis) => {
                let av = val(*a);
                let n = av.shape()[*axis] as f64;
                let mut da = ArrayD::zeros(av.raw_dim());
                for mut lane in da.axis_iter_mut(Axis(*axis)) {
                    ndarray::Zip::from(&mut lane).and(g).for_each(|d, &ge| *d += ge / n);
                }
                accum(grads, *a, &da);
            }
            Op::SortedMeanAxis0(a) => {
                let av = as2(val(*a), "sorted_mean grad");
                let gv = as1(g, "sorted_mean grad");
                let n = av.nrows() as f64;
                let mut da = ArrayD::zeros(IxDyn(&[av.nrows(), av.ncols()]));
                for i in 0..av.nrows() {
                    for j in 0..av.ncols() {
                        da[[i, j]] = gv[j] / n;
                    }
                }
                accum(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let da = softmax_backward(y, g);
                accum(grads, *a, &da);
            }
            Op::Concat(parts) => {
                let gv = as1(g, "concat grad");
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    let slice = gv.slice(ndarray::s![off..off + len]).to_owned();
                    accum(grads, p, &slice.into_dyn());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let gv = as2(g, "concat_cols grad");
                let mut off = 0;
                for &p in parts {
                    let cols = as2(val(p), "concat_cols part").ncols();
                    let slice = gv.slice(ndarray::s![.., off..off + cols]).to_owned();
                    accum(grads, p, &slice.into_dyn());
                    off += cols;
                }
            }
            Op::Row(a, i) => {
                let av = as2(val(*a), "row grad");
                let gv = as1(g, "row grad");
                let mut da = ArrayD::zeros(IxDyn(&[av.nrows(), av.ncols()]));
                for j in 0..av.ncols() {
                    da[[*i, j]] = gv[j];
                }
                accum(grads, *a, &da);
            }
            Op::StackRows(rows) => {
                let gv = as2(g, "stack_rows grad");
                for (i, &r) in rows.iter().enumerate() {
                    accum(grads, r, &gv.row(i).to_owned().into_dyn());
                }
            }
            Op::Reshape(a) => {
                let da = reshaped(g, val(*a).raw_dim());
                accum(grads, *a, &da);
            }
            Op::Transpose(a) => {
                let gv = as2(g, "transpose grad");
                accum(grads, *a, &gv.t().to_owned().into_dyn());
            }
            Op::CrossEntropy(logits, targets) => {
                let gs = scalar_of(g) / targets.len() as f64;
                let probs = softmax_value(val(*logits));
                let p2 = as2(&probs, "cross_entropy probs");
                let mut da = p2.to_owned();
                for (i, &t) in targets.iter().enumerate() {
                    da[[i, t]] -= 1.0;
                }
                accum(grads, *logits, &da.mapv(|x| gs * x).into_dyn());
            }
            Op::Conv2d { input, kernel, bias } => {
                let x = val(*input);
                let k = val(*kernel);
                let (kh, kw, cin, cout) =
                    (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
                let (oh, ow) = (g.shape()[0], g.shape()[1]);
                let mut dx = ArrayD::zeros(x.raw_dim());
                let mut dk = ArrayD::zeros(k.raw_dim());
                let mut db = ArrayD::zeros(IxDyn(&[cout]));
                for p in 0..oh {
                    for q in 0..ow {
                        for co in 0..cout {
                            let ge = g[[p, q, co]];
                            db[[co]] += ge;
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    for ci in 0..cin {
                                        dx[[p + dh, q + dw, ci]] += ge * k[[dh, dw, ci, co]];
                                        dk[[dh, dw, ci, co]] += ge * x[[p + dh, q + dw, ci]];
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, *input, &dx);
                accum(grads, *kernel, &dk);
                accum(grads, *bias, &db);
            }
        }
    }
}

/// Reshape regardless of the source array's memory layout; elements keep
/// their logical row-major order.
fn reshaped(a: &ArrayD<f64>, dim: IxDyn) -> ArrayD<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    ArrayD::from_shape_vec(dim, flat).expect("reshape element count mismatch")
}

fn as1(a: &ArrayD<f64>, ctx: &str) -> ndarray::Array1<f64> {
    a.clone()
        .into_dimensionality::<Ix1>()
        .unwrap_or_else(|_| panic!("{ctx}: expected 1-D, got shape {:?}", a.shape()))
}

fn as2(a: &ArrayD<f64>, ctx: &str) -> ndarray::Array2<f64> {
    a.clone()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("{ctx}: expected 2-D, got shape {:?}", a.shape()))
}

/// Elementwise binary op, allowing a 0-d scalar on either side.
fn ew_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    ctx: &str,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
    } else if is_scalar(b) {
        let s = scalar_of(b);
        a.mapv(|x| f(x, s))
    } else if is_scalar(a) {
        let s = scalar_of(a);
        b.mapv(|y| f(s, y))
    } else {
        panic!("{ctx}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    }
}

/// Add `contribution` to `grads[idx]`, reducing to a 0-d sum when the target
/// node is a scalar that was broadcast in the forward op.
fn accum_broadcast(
    grads: &mut [Option<ArrayD<f64>>],
    idx: Var,
    contribution: &ArrayD<f64>,
    target_value: &ArrayD<f64>,
) {
    if target_value.shape() == contribution.shape() {
        accum(grads, idx, contribution);
    } else if is_scalar(target_value) {
        let summed = ArrayD::from_elem(IxDyn(&[]), contribution.sum());
        accum(grads, idx, &summed);
    } else {
        panic!(
            "gradient shape {:?} incompatible with node shape {:?}",
            contribution.shape(),
            target_value.shape()
        );
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], idx: Var, contribution: &ArrayD<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += contribution,
        slot => *slot = Some(contribution.clone()),
    }
}

fn softmax_value(a: &ArrayD<f64>) -> ArrayD<f64> {
    match a.ndim() {
        1 => {
            let v = as1(a, "softmax");
            softmax_1d(v.as_slice().unwrap()).into_dyn()
        }
        2 => {
            let v = as2(a, "softmax");
            let mut out = v.clone();
            for mut r in out.rows_mut() {
                let s = softmax_1d(r.as_slice().unwrap());
                r.assign(&s);
            }
            out.into_dyn()
        }
        n => panic!("softmax expects 1-D or 2-D input, got {n}-D"),
    }
}

fn softmax_1d(x: &[f64]) -> ndarray::Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    ndarray::Array1::from_vec(out)
}

fn softmax_backward(y: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    match y.ndim() {
        1 => {
            let yv = as1(y, "softmax grad");
            let gv = as1(g, "softmax grad");
            let inner = gv.dot(&yv);
            ndarray::Zip::from(&yv)
                .and(&gv)
                .map_collect(|&ye, &ge| ye * (ge - inner))
                .into_dyn()
        }
        2 => {
            let yv = as2(y, "softmax grad");
            let gv = as2(g, "softmax grad");
            let mut out = yv.clone();
            for i in 0..yv.nrows() {
                let inner = gv.row(i).dot(&yv.row(i));
                for j in 0..yv.ncols() {
                    out[[i, j]] = yv[[i, j]] * (gv[[i, j]] - inner);
                }
            }
            out.into_dyn()
        }
        n => panic!("softmax grad expects 1-D or 2-D, got {n}-D"),
    }
}
