//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and enter the graph by reference; [`Graph::backward`]
//! returns one gradient matrix per stored parameter.

use std::collections::HashMap;
use std::ops::Range;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// Named trainable parameters, kept in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Panics on duplicate names; layer construction is static.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let id = self.id(name)?;
        Some(self.value_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    pub fn norm(&self) -> T {
        self.params.iter().map(|p| p.value.sum_sq()).sum::<T>().sqrt()
    }
}

/// Per-parameter gradients, aligned with [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.scale_in_place(s);
        }
    }

    pub fn norm(&self) -> T {
        self.grads.iter().map(Matrix::sum_sq).sum::<T>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let norm = self.norm();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var },
    Normalize { x: Var, inv_std: Vec<T> },
    Gather { table: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SpanMean { x: Var, spans: Vec<Range<usize>> },
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, eps: T, probs: Matrix<T> },
    SquaredError { pred: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

const GELU_K: f64 = 0.044_715;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.get(0, 0)
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Parameter leaf; repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols(), "add_row width mismatch");
        let r = r.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` element-wise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols(), "mul_row width mismatch");
        let r = r.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(GELU_K);
        let half = T::lit(0.5);
        let out = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let width = if causal { (i + 1).min(x.cols()) } else { x.cols() };
            let row = &x.row(i)[..width];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            let o = out.row_mut(i);
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                o[j] = e;
                total += e;
            }
            for v in &mut o[..width] {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax { x: a })
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::lit(x.cols() as f64);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::Normalize { x: a, inv_std })
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(indices.len(), t.cols());
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(idx));
        }
        self.push(out, Op::Gather { table, indices: indices.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), cols.len());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[cols.clone()]);
        }
        self.push(out, Op::SliceCols { x: a, start: cols.start })
    }

    /// Mean of the rows inside each span; one output row per span.
    pub fn span_mean(&mut self, a: Var, spans: &[Range<usize>]) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(spans.len(), x.cols());
        for (s, span) in spans.iter().enumerate() {
            assert!(!span.is_empty() && span.end <= x.rows(), "span_mean span out of range");
            let inv = T::one() / T::lit(span.len() as f64);
            let o = out.row_mut(s);
            for r in span.clone() {
                for (acc, &v) in o.iter_mut().zip(x.row(r)) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, Op::SpanMean { x: a, spans: spans.to_vec() })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).as_slice().iter().copied().sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a))
    }

    /// Summed label-smoothed cross-entropy over rows of `logits`.
    ///
    /// Row `i` contributes `-Σ_k q(k) log p(k)` with
    /// `q = (1 - eps)·onehot(targets[i]) + eps / K`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], eps: T) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "cross_entropy target count mismatch");
        let k = x.cols();
        let mut probs = Matrix::zeros(x.rows(), k);
        let mut total = T::zero();
        for (i, &y) in targets.iter().enumerate() {
            let row = x.row(i);
            total += smoothed_cross_entropy_row(row, y, eps);
            probs.row_mut(i).copy_from_slice(&crate::scalar::softmax(row));
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), eps, probs };
        self.push(Matrix::filled(1, 1, total), op)
    }

    /// `Σ_i (pred_i - target_i)²` for an `n × 1` prediction column.
    pub fn squared_error_sum(&mut self, pred: Var, targets: &[T]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.as_slice().len(), targets.len(), "squared_error target count mismatch");
        let total: T = p.as_slice().iter().zip(targets).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push(Matrix::filled(1, 1, total), Op::SquaredError { pred, targets: targets.to_vec() })
    }

    /// Back-propagates from the `1 × 1` node `root` and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.grads[id.0].add_assign(&dy),
                Op::MatMul(a, b) => {
                    let da = dy.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = dy.matmul(self.value(*b));
                    let db = dy.matmul_at(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, dy.column_sums());
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |g, y| g * y);
                    let db = dy.zip_map(self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row).as_slice();
                    let x = self.value(*a);
                    let mut da = dy.clone();
                    let mut dr = Matrix::zeros(1, r.len());
                    for i in 0..dy.rows() {
                        let g = dy.row(i);
                        let xi = x.row(i);
                        for j in 0..r.len() {
                            dr.as_mut_slice()[j] += g[j] * xi[j];
                        }
                        for (d, &rv) in da.row_mut(i).iter_mut().zip(r) {
                            *d *= rv;
                        }
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, da);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::AddConst(a) => acc(&mut grads, *a, dy),
                Op::Gelu(a) => {
                    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                    let k = T::lit(GELU_K);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let dx = self.value(*a).zip_map(&dy, |x, g| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        g * d
                    });
                    acc(&mut grads, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let dx = node.value.zip_map(&dy, |s, g| g * s * (T::one() - s));
                    acc(&mut grads, *a, dx);
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let pr = p.row(i);
                        let gr = dy.row(i);
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &pv), &gv) in dx.row_mut(i).iter_mut().zip(pr).zip(gr) {
                            *d = pv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Normalize { x, inv_std } => {
                    let y = &node.value;
                    let n = T::lit(y.cols() as f64);
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = dy.row(i);
                        let mean_g = gr.iter().copied().sum::<T>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / n;
                        for ((d, &g), &v) in dx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[i] * (g - mean_g - v * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, indices } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        for (d, &g) in dt.row_mut(idx).iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Matrix::zeros(dy.rows(), w);
                        for i in 0..dy.rows() {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..dy.rows() {
                        dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SpanMean { x, spans } => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (s, span) in spans.iter().enumerate() {
                        let inv = T::one() / T::lit(span.len() as f64);
                        for r in span.clone() {
                            for (d, &g) in dx.row_mut(r).iter_mut().zip(dy.row(s)) {
                                *d += g * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SumAll(a) => {
                    let g = dy.get(0, 0);
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g));
                }
                Op::CrossEntropy { logits, targets, eps, probs } => {
                    let g = dy.get(0, 0);
                    let k = probs.cols();
                    let uniform = *eps / T::lit(k as f64);
                    let mut dx = probs.clone();
                    for (i, &y) in targets.iter().enumerate() {
                        let row = dx.row_mut(i);
                        for (j, v) in row.iter_mut().enumerate() {
                            let q = if j == y { T::one() - *eps + uniform } else { uniform };
                            *v = (*v - q) * g;
                        }
                    }
                    acc(&mut grads, *logits, dx);
                }
                Op::SquaredError { pred, targets } => {
                    let g = dy.get(0, 0);
                    let two = T::lit(2.0);
                    let p = self.value(*pred);
                    let data = p.as_slice().iter().zip(targets).map(|(&a, &b)| two * (a - b) * g).collect();
                    acc(&mut grads, *pred, Matrix::from_vec(p.rows(), p.cols(), data));
                }
            }
        }
        out
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `-Σ_k q(k) log softmax(row)(k)` with `q = (1-eps)·onehot(y) + eps/K`.
pub fn smoothed_cross_entropy_row<T: Scalar>(row: &[T], y: usize, eps: T) -> T {
    let logp = crate::scalar::log_softmax(row);
    let uniform = eps / T::lit(row.len() as f64);
    let mut loss = T::zero();
    for (k, &lp) in logp.iter().enumerate() {
        let q = if k == y { T::one() - eps + uniform } else { uniform };
        loss -= q * lp;
    }
    loss
}
