//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Leaves may borrow
//! parameter tensors for the lifetime of the tape, so a forward pass never
//! copies weights. [`Tape::backward`] walks the records in reverse creation
//! order (which is a valid topological order) and returns a [`Gradients`]
//! table; callers fold those into parameter tensors explicitly.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::scalar::{flush, gemm, MatRef};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `x · wᵀ`
    MatMulT { x: usize, w: usize },
    AddRow { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    AddConst { x: usize },
    MaskMul { x: usize, mask: Vec<T> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Softmax { x: usize, group: usize, inv_tau: T },
    ConcatCols { a: usize, b: usize },
    ConcatRows { a: usize, b: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SliceRows { x: usize, start: usize },
    LogClamp { x: usize, lo: T, hi: T },
    Sum { x: usize },
    Mean { x: usize },
    SoftmaxXent { logits: usize, target: Vec<T>, probs: Vec<T>, inv_tau: T },
    CrossEntropy { target: usize, pred: usize, eps: T },
    MseRows { a: usize, b: usize },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

/// Gradient of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the value does not influence the loss through differentiable ops.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but yields zeros of the right length for unreached values.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Cow<'_, [T]> {
        match self.get(v) {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(vec![T::zero(); len]),
        }
    }
}

fn dims(t: &Tensor<impl Scalar>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [T]>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn val(&self, v: usize) -> &[T] {
        &self.nodes[v].value
    }

    /// Borrowed parameter leaf; differentiable iff the tensor requires grad.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let (r, c) = dims(t);
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Borrowed constant leaf (no gradient).
    pub fn input(&mut self, t: &'a Tensor<T>) -> Var {
        let (r, c) = dims(t);
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let (r, c) = dims(&t);
        self.push(r, c, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (r, c) = (n.rows, n.cols);
        let data = n.value.to_vec();
        self.push(r, c, Cow::Owned(data), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.val(v.0)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.val(v.0).to_vec()).expect("tape node shape")
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.shape(v) {
            (1, 1) => Ok(self.val(v.0)[0]),
            s => Err(Error::shape(format!("expected a scalar, found {s:?}"))),
        }
    }

    pub fn ensure_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.val(v.0).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<T> = self.val(x.0).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x.0);
        self.push(r, c, Cow::Owned(out), op, ng)
    }

    /// `x · wᵀ` for `x` of shape (n, k) and `w` of shape (m, k).
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (m, k2) = self.shape(w);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: input has {k} columns, weight expects {k2}"
            )));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            MatRef::new(self.val(x.0), n, k),
            MatRef::new(self.val(w.0), m, k).t(),
            &mut out,
            T::zero(),
        );
        let ng = self.ng(x.0) || self.ng(w.0);
        Ok(self.push(n, m, Cow::Owned(out), Op::MatMulT { x: x.0, w: w.0 }, ng))
    }

    /// Adds a row vector `b` (1 x c) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (1, c) {
            return Err(Error::shape(format!(
                "bias {:?} does not broadcast over {c} columns",
                self.shape(b)
            )));
        }
        let bias = self.val(b.0);
        let mut out = self.val(x.0).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
        }
        let ng = self.ng(x.0) || self.ng(b.0);
        Ok(self.push(r, c, Cow::Owned(out), Op::AddRow { x: x.0, b: b.0 }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let out: Vec<T> = self
            .val(a.0)
            .iter()
            .zip(self.val(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(r, c, Cow::Owned(out), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x: x.0 })
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// Adds a constant array of the same shape (e.g. sampled noise).
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        let (r, cols) = self.shape(x);
        if c.len() != r * cols {
            return Err(Error::shape("add_const: constant length differs"));
        }
        let out: Vec<T> = self.val(x.0).iter().zip(c).map(|(&v, &k)| v + k).collect();
        let ng = self.ng(x.0);
        Ok(self.push(r, cols, Cow::Owned(out), Op::AddConst { x: x.0 }, ng))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(Error::shape("mask_mul: mask length differs"));
        }
        let out: Vec<T> = self.val(x.0).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let ng = self.ng(x.0);
        Ok(self.push(r, c, Cow::Owned(out), Op::MaskMul { x: x.0, mask }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x: x.0 })
    }

    /// Softmax of `x / tau` over consecutive groups of `group` columns.
    pub fn softmax_groups(&mut self, x: Var, group: usize, tau: T) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let (r, c) = self.shape(x);
        if group == 0 || c % group != 0 {
            return Err(Error::shape(format!("{c} columns do not split into groups of {group}")));
        }
        let inv_tau = T::one() / tau;
        let mut out = self.val(x.0).to_vec();
        for g in out.chunks_mut(group) {
            softmax_in_place(g, inv_tau);
        }
        let ng = self.ng(x.0);
        Ok(self.push(r, c, Cow::Owned(out), Op::Softmax { x: x.0, group, inv_tau }, ng))
    }

    pub fn softmax(&mut self, x: Var, tau: T) -> Result<Var> {
        let c = self.shape(x).1;
        self.softmax_groups(x, c, tau)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape(format!("concat_cols: {ra} vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&self.val(a.0)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.val(b.0)[i * cb..(i + 1) * cb]);
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(ra, ca + cb, Cow::Owned(out), Op::ConcatCols { a: a.0, b: b.0 }, ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(Error::shape(format!("concat_rows: {ca} vs {cb} columns")));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.val(a.0));
        out.extend_from_slice(self.val(b.0));
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(ra + rb, ca, Cow::Owned(out), Op::ConcatRows { a: a.0, b: b.0 }, ng))
    }

    /// Row `i` of the result is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather_rows: index {bad} out of {r} rows")));
        }
        let src = self.val(x.0);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x.0);
        let n = idx.len();
        Ok(self.push(n, c, Cow::Owned(out), Op::GatherRows { x: x.0, idx }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape(format!("slice_rows: {start}+{len} exceeds {r} rows")));
        }
        let out = self.val(x.0)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x.0);
        Ok(self.push(len, c, Cow::Owned(out), Op::SliceRows { x: x.0, start }, ng))
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi).ln(), Op::LogClamp { x: x.0, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.val(x.0).iter().copied().sum();
        let ng = self.ng(x.0);
        self.push(1, 1, Cow::Owned(vec![s]), Op::Sum { x: x.0 }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.val(x.0);
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s: T = v.iter().copied().sum::<T>() / n;
        let ng = self.ng(x.0);
        self.push(1, 1, Cow::Owned(vec![s]), Op::Mean { x: x.0 }, ng)
    }

    /// Mean over rows of `-Σ_j target_j · log softmax(logits / tau)_j`.
    ///
    /// Fused form of a temperature softmax followed by the full-distribution
    /// cross-entropy; `target` is a constant.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Vec<T>, tau: T) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let (r, c) = self.shape(logits);
        if target.len() != r * c {
            return Err(Error::shape(format!(
                "targets have {} values for {r}x{c} logits",
                target.len()
            )));
        }
        let inv_tau = T::one() / tau;
        let mut probs = self.val(logits.0).to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(c.max(1)).enumerate() {
            let lse = log_sum_exp_scaled(row, inv_tau);
            for (j, p) in row.iter_mut().enumerate() {
                let logp = *p * inv_tau - lse;
                total -= target[i * c + j] * logp;
                *p = logp.exp();
            }
        }
        let loss = total / T::from_usize(r.max(1)).unwrap();
        let ng = self.ng(logits.0);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![loss]),
            Op::SoftmaxXent {
                logits: logits.0,
                target,
                probs,
                inv_tau,
            },
            ng,
        ))
    }

    /// Mean over rows of `-Σ_j target_j · log(pred_j + eps)`; both sides differentiable.
    pub fn cross_entropy(&mut self, target: Var, pred: Var, eps: T) -> Result<Var> {
        let (r, _) = self.same_shape(target, pred, "cross_entropy")?;
        let total: T = self
            .val(target.0)
            .iter()
            .zip(self.val(pred.0))
            .map(|(&t, &p)| -t * (p + eps).ln())
            .sum();
        let loss = total / T::from_usize(r.max(1)).unwrap();
        let ng = self.ng(target.0) || self.ng(pred.0);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                target: target.0,
                pred: pred.0,
                eps,
            },
            ng,
        ))
    }

    /// Mean over rows of `Σ_k ½ (a_k - b_k)²`.
    pub fn mse_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, _) = self.same_shape(a, b, "mse")?;
        let half = T::from_f64_lossy(0.5);
        let total: T = self
            .val(a.0)
            .iter()
            .zip(self.val(b.0))
            .map(|(&x, &y)| half * (x - y) * (x - y))
            .sum();
        let loss = total / T::from_usize(r.max(1)).unwrap();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(1, 1, Cow::Owned(vec![loss]), Op::MseRows { a: a.0, b: b.0 }, ng))
    }

    /// Back-propagates from a scalar. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            g.iter_mut().for_each(|v| *v = flush(*v));
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT { x, w } => {
                let (_, k) = (self.nodes[*x].rows, self.nodes[*x].cols);
                if self.ng(*x) {
                    // dx = g · w
                    let buf = slot(grads, *x, rows * k);
                    gemm(
                        MatRef::new(g, rows, cols),
                        MatRef::new(self.val(*w), cols, k),
                        buf,
                        T::one(),
                    );
                }
                if self.ng(*w) {
                    // dw = gᵀ · x
                    let buf = slot(grads, *w, cols * k);
                    gemm(
                        MatRef::new(g, rows, cols).t(),
                        MatRef::new(self.val(*x), rows, k),
                        buf,
                        T::one(),
                    );
                }
            }
            Op::AddRow { x, b } => {
                if self.ng(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, cols);
                    for row in g.chunks(cols.max(1)) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.ng(*b) {
                    add_into(slot(grads, *b, g.len()), g);
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let other = self.val(*b);
                    let buf = slot(grads, *a, g.len());
                    for ((d, &v), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d += v * o;
                    }
                }
                if self.ng(*b) {
                    let other = self.val(*a);
                    let buf = slot(grads, *b, g.len());
                    for ((d, &v), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d += v * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
            }
            Op::AddScalar { x } | Op::AddConst { x } => {
                add_into(slot(grads, *x, g.len()), g);
            }
            Op::MaskMul { x, mask } => {
                let buf = slot(grads, *x, g.len());
                for ((d, &v), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += v * m;
                }
            }
            Op::Relu { x } => {
                let buf = slot(grads, *x, g.len());
                for ((d, &v), &out) in buf.iter_mut().zip(g).zip(y.iter()) {
                    if out > T::zero() {
                        *d += v;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let buf = slot(grads, *x, g.len());
                for ((d, &v), &s) in buf.iter_mut().zip(g).zip(y.iter()) {
                    *d += v * s * (T::one() - s);
                }
            }
            Op::Tanh { x } => {
                let buf = slot(grads, *x, g.len());
                for ((d, &v), &t) in buf.iter_mut().zip(g).zip(y.iter()) {
                    *d += v * (T::one() - t * t);
                }
            }
            Op::Softmax { x, group, inv_tau } => {
                let buf = slot(grads, *x, g.len());
                for ((dg, gg), yg) in buf
                    .chunks_mut(*group)
                    .zip(g.chunks(*group))
                    .zip(y.chunks(*group))
                {
                    let dot: T = gg.iter().zip(yg).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dg.iter_mut().zip(gg).zip(yg) {
                        *d += *inv_tau * yv * (gv - dot);
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.nodes[*a].cols;
                let cb = self.nodes[*b].cols;
                if self.ng(*a) {
                    let buf = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        add_into(&mut buf[r * ca..(r + 1) * ca], &g[r * cols..r * cols + ca]);
                    }
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        add_into(&mut buf[r * cb..(r + 1) * cb], &g[r * cols + ca..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[*a].rows * cols;
                if self.ng(*a) {
                    add_into(slot(grads, *a, na), &g[..na]);
                }
                if self.ng(*b) {
                    add_into(slot(grads, *b, g.len() - na), &g[na..]);
                }
            }
            Op::GatherRows { x, idx } => {
                let n = self.nodes[*x].rows * cols;
                let buf = slot(grads, *x, n);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut buf[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.nodes[*x].rows * cols;
                let buf = slot(grads, *x, n);
                add_into(&mut buf[start * cols..start * cols + g.len()], g);
            }
            Op::LogClamp { x, lo, hi } => {
                let xv = self.val(*x);
                let buf = slot(grads, *x, g.len());
                for ((d, &v), &xi) in buf.iter_mut().zip(g).zip(xv) {
                    if xi >= *lo && xi <= *hi {
                        *d += v / xi;
                    }
                }
            }
            Op::Sum { x } => {
                let n = self.val(*x).len();
                let buf = slot(grads, *x, n);
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let n = self.val(*x).len();
                let share = g[0] / T::from_usize(n.max(1)).unwrap();
                let buf = slot(grads, *x, n);
                buf.iter_mut().for_each(|d| *d += share);
            }
            Op::SoftmaxXent {
                logits,
                target,
                probs,
                inv_tau,
            } => {
                let (r, c) = (self.nodes[*logits].rows, self.nodes[*logits].cols);
                let scale = g[0] * *inv_tau / T::from_usize(r.max(1)).unwrap();
                let buf = slot(grads, *logits, r * c);
                for ((dr, tr), pr) in buf
                    .chunks_mut(c.max(1))
                    .zip(target.chunks(c.max(1)))
                    .zip(probs.chunks(c.max(1)))
                {
                    let mass: T = tr.iter().copied().sum();
                    for ((d, &t), &p) in dr.iter_mut().zip(tr).zip(pr) {
                        *d += scale * (p * mass - t);
                    }
                }
            }
            Op::CrossEntropy { target, pred, eps } => {
                let r = self.nodes[*pred].rows;
                let scale = g[0] / T::from_usize(r.max(1)).unwrap();
                let (tv, pv) = (self.val(*target), self.val(*pred));
                if self.ng(*target) {
                    let buf = slot(grads, *target, tv.len());
                    for (d, &p) in buf.iter_mut().zip(pv) {
                        *d -= scale * (p + *eps).ln();
                    }
                }
                if self.ng(*pred) {
                    let buf = slot(grads, *pred, pv.len());
                    for ((d, &t), &p) in buf.iter_mut().zip(tv).zip(pv) {
                        *d -= scale * t / (p + *eps);
                    }
                }
            }
            Op::MseRows { a, b } => {
                let r = self.nodes[*a].rows;
                let scale = g[0] / T::from_usize(r.max(1)).unwrap();
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.ng(*a) {
                    let buf = slot(grads, *a, av.len());
                    for ((d, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, bv.len());
                    for ((d, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        flush(e / (T::one() + e))
    }
}

/// `log Σ exp(x_j · inv_tau)` computed with max subtraction.
pub(crate) fn log_sum_exp_scaled<T: Scalar>(row: &[T], inv_tau: T) -> T {
    let max = row
        .iter()
        .map(|&v| v * inv_tau)
        .fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v * inv_tau - max).exp()).sum();
    max + s.ln()
}

/// In-place softmax of `x · inv_tau`; scaling happens before the max is subtracted.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], inv_tau: T) {
    row.iter_mut().for_each(|v| *v *= inv_tau);
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = flush((*v - max).exp());
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let theta = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let p = tape.param(&theta);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let theta = Tensor::<f64>::new(vec![3], vec![0.3, 0.1, 9.0]).unwrap().with_grad();
        let c = Tensor::<f64>::new(vec![1], vec![4.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&theta);
        let k = tape.input(&c);
        let loss = tape.sum(k);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert!(grads.get_or_zeros(p, 3).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let theta = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let p = tape.param(&theta);
        assert!(matches!(tape.backward(p), Err(Error::Tape(_))));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let theta = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let p = tape.param(&theta);
        let d = tape.detach(p);
        let prod = tape.mul(p, d).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        // d/dp (p * const) = const
        assert_eq!(grads.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::<f64>::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.input(&x);
        assert!(tape.softmax(v, 0.0).is_err());
        assert!(tape.softmax(v, -1.0).is_err());
        assert!(tape.softmax_groups(v, 3, 1.0).is_err());
    }

    /// Central-difference check of d loss / d theta for a loss built by `f`.
    fn check(theta: Vec<f64>, rows: usize, f: impl Fn(&mut Tape<'_, f64>, Var) -> Var) {
        let cols = theta.len() / rows;
        let eval = |v: &[f64]| {
            let t = Tensor::matrix(rows, cols, v.to_vec()).unwrap();
            let mut tape = Tape::new();
            let p = tape.input(&t);
            let l = f(&mut tape, p);
            tape.scalar(l).unwrap()
        };
        let t = Tensor::matrix(rows, cols, theta.clone()).unwrap().with_grad();
        let mut tape = Tape::new();
        let p = tape.param(&t);
        let l = f(&mut tape, p);
        let grads = tape.backward(l).unwrap();
        let g = grads.get_or_zeros(p, theta.len());
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs().max(g[i].abs()));
            assert!((fd - g[i]).abs() < tol, "component {i}: analytic {} vs numeric {fd}", g[i]);
        }
    }

    fn theta(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * 0.731 + seed as f64).sin() * 1.3).collect()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(theta(6, 0), 2, |t, p| {
            let a = t.sigmoid(p);
            let b = t.tanh(p);
            let c = t.mul(a, b).unwrap();
            let d = t.sub(c, p).unwrap();
            let e = t.scale(d, 1.7);
            let f = t.add_scalar(e, 0.3);
            let g = t.one_minus(f);
            let h = t.add_const(g, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
            let k = t.mask_mul(h, vec![1.0, 0.0, 2.0, 1.0, 1.0, 0.5]).unwrap();
            let r = t.relu(p);
            let m = t.add(k, r).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.mean(sq)
        });
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        let w = Tensor::<f64>::matrix(3, 4, theta(12, 5)).unwrap();
        let b = Tensor::<f64>::matrix(1, 3, vec![0.1, -0.2, 0.3]).unwrap();
        check(theta(8, 1), 2, |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let z = t.matmul_t(x, wv).unwrap();
            let z = t.add_row(z, bv).unwrap();
            let z = t.tanh(z);
            let z2 = t.mul(z, z).unwrap();
            t.sum(z2)
        });
        let x = Tensor::<f64>::matrix(2, 4, theta(8, 2)).unwrap();
        check(theta(12, 3), 3, |t, w| {
            let xv = t.constant(x.clone());
            let z = t.matmul_t(xv, w).unwrap();
            let z = t.sigmoid(z);
            t.sum(z)
        });
        check(vec![0.5, -1.0, 2.0], 1, |t, b| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let z = t.matmul_t(xv, wv).unwrap();
            let z = t.add_row(z, b).unwrap();
            let z = t.tanh(z);
            t.sum(z)
        });
    }

    #[test]
    fn softmax_and_losses_match_finite_differences() {
        let target = vec![0.1, 0.6, 0.3, 0.0, 0.25, 0.25, 0.5, 0.0];
        check(theta(8, 4), 2, |t, p| {
            let s = t.softmax_groups(p, 2, 0.7).unwrap();
            let w = t.mul(s, s).unwrap();
            t.sum(w)
        });
        check(theta(8, 5), 2, |t, p| t.softmax_cross_entropy(p, target.clone(), 0.5).unwrap());
        check(theta(8, 6), 2, |t, p| {
            let q = t.softmax(p, 1.0).unwrap();
            let tg = t.constant(Tensor::matrix(2, 4, target.clone()).unwrap());
            t.cross_entropy(tg, q, 1e-12).unwrap()
        });
        // gradient through the target side as well
        check(theta(8, 7), 2, |t, p| {
            let q = t.softmax(p, 1.0).unwrap();
            let r = t.softmax(p, 2.0).unwrap();
            t.cross_entropy(q, r, 1e-12).unwrap()
        });
        check(theta(6, 8), 3, |t, p| {
            let c = t.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.5, -0.5, 2.0, 1.0]).unwrap());
            let s = t.tanh(p);
            t.mse_rows(s, c).unwrap()
        });
        check(vec![0.3, 0.9, 0.5, 1e-3], 1, |t, p| {
            let l = t.log_clamped(p, 1e-2, 0.8);
            t.sum(l)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(theta(6, 9), 3, |t, p| {
            let a = t.slice_rows(p, 1, 2).unwrap();
            let b = t.gather_rows(p, vec![2, 0, 2]).unwrap();
            let c = t.concat_rows(a, b).unwrap();
            let d = t.concat_cols(c, c).unwrap();
            let e = t.tanh(d);
            let f = t.mul(e, d).unwrap();
            t.sum(f)
        });
    }
}
