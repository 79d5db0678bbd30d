//! Define-by-run reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node; nodes only reference
//! earlier nodes, so the node vector is already in topological order and the
//! backward pass is a single reverse sweep.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{numel, ModelParams, ParamId, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// Same-shape elementwise.
    Binary(Binary, Var, Var),
    /// Elementwise against a one-element tensor; the flag records whether the
    /// scalar was the left operand.
    BinaryScalar(Binary, Var, Var, bool),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    Unary(Unary, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SliceCols(Var, usize),
    Sum(Var),
    SumCols(Var),
}

struct Node {
    shape: Vec<usize>,
    /// Empty for `Op::Param`; the value lives in the borrowed [`ModelParams`].
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    vars: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adjoint of a leaf created with [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(&v.0).map(Vec::as_slice)
    }
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
    // One node per parameter, so its adjoint buffer is allocated once.
    param_nodes: BTreeMap<ParamId, Var>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `c (m×n) += a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: strides describe matrices lying entirely within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || numel(&shape) == value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape/value agree")
    }

    /// A constant: no adjoint is propagated into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, AutodiffError> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// A leaf whose adjoint is reported through [`Gradients::wrt`].
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = self.params.get(id);
        let v = self.push(t.shape().to_vec(), Vec::new(), Op::Param(id), t.requires_grad());
        self.param_nodes.insert(id, v);
        v
    }

    /// Same as [`Tape::param`] but cut off from the gradient.
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_vec();
        let shape = self.shape(v).to_vec();
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let ng = self.ng(a) || self.ng(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(self.push(sa, out, Op::Binary(kind, a, b), ng));
        }
        let (na, nb) = (numel(&sa), numel(&sb));
        if nb == 1 {
            let y = self.value(b)[0];
            let out = self.value(a).iter().map(|&x| f(x, y)).collect();
            Ok(self.push(sa, out, Op::BinaryScalar(kind, a, b, false), ng))
        } else if na == 1 {
            let x = self.value(a)[0];
            let out = self.value(b).iter().map(|&y| f(x, y)).collect();
            Ok(self.push(sb, out, Op::BinaryScalar(kind, b, a, true), ng))
        } else {
            Err(AutodiffError::ShapeMismatch {
                op: "elementwise",
                left: sa,
                right: sb,
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, out, Op::Scale(a, factor), ng)
    }

    /// Clamps into `[lo, hi]`; the adjoint is cut where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let out: Vec<f64> = match kind {
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => x.iter().map(|&v| libm::tanh(v)).collect(),
            Unary::Exp => x.iter().map(|&v| libm::exp(v)).collect(),
            Unary::Square => x.iter().map(|&v| v * v).collect(),
            Unary::Log => {
                if let Some(&bad) = x.iter().find(|&&v| !(v > 0.0)) {
                    return Err(AutodiffError::Domain { op: "log", value: bad });
                }
                x.iter().map(|&v| libm::log(v)).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Unary(kind, a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Log, a)
    }

    /// `a (m×n) + bias (n)` applied to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, n) = rows_cols(self.shape(a));
        if numel(self.shape(bias)) != n || self.shape(a).is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n]
                .iter_mut()
                .zip(b)
                .for_each(|(o, v)| *o += v);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(shape, out, Op::AddRow(a, bias), ng))
    }

    /// Multiplies row `i` of `a (m×n)` by `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var, AutodiffError> {
        let (m, n) = rows_cols(self.shape(a));
        if numel(self.shape(w)) != m || self.shape(a).is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let wv = self.value(w);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().for_each(|o| *o *= wv[r]);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(shape, out, Op::ScaleRows(a, w), ng))
    }

    fn check_finite(&self, v: Var, op: &'static str) -> Result<(), AutodiffError> {
        match self.value(v).iter().find(|x| !x.is_finite()) {
            Some(&bad) => Err(AutodiffError::Domain { op, value: bad }),
            None => Ok(()),
        }
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_finite(a, "softmax")?;
        let (m, n) = rows_cols(self.shape(a));
        if n == 0 {
            return Err(AutodiffError::Empty("softmax"));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n).take(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::SoftmaxRows(a), ng))
    }

    /// Log-softmax over the last axis, max-shifted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_finite(a, "log_softmax")?;
        let (m, n) = rows_cols(self.shape(a));
        if n == 0 {
            return Err(AutodiffError::Empty("log_softmax"));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n).take(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lz = mx + libm::log(z);
            row.iter_mut().for_each(|v| *v -= lz);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::LogSoftmaxRows(a), ng))
    }

    /// Selects rows of a `V×d` table, giving `ids.len()×d`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                left: shape.to_vec(),
                right: vec![ids.len()],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::Index { op: "gather_rows", index: bad, bound: v });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![ids.len(), d], out, Op::GatherRows(table, ids.to_vec()), ng))
    }

    /// `out[i] = a[i, idx[i]]` for `a (m×n)`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (m, n) = rows_cols(self.shape(a));
        if idx.len() != m || self.shape(a).is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "pick",
                left: self.shape(a).to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Index { op: "pick", index: bad, bound: n });
        }
        let src = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![m], out, Op::Pick(a, idx.to_vec()), ng))
    }

    /// Columns `start..start + len` of `a (m×n)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (m, n) = rows_cols(self.shape(a));
        if start + len > n || self.shape(a).len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                left: self.shape(a).to_vec(),
                right: vec![start, len],
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of `a (m×n)`, giving `m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let src = self.value(a);
        let out = (0..m).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect();
        let ng = self.ng(a);
        self.push(vec![m], out, Op::SumCols(a), ng)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every trainable parameter of the borrowed collection gets an entry,
    /// zero-filled when the loss does not reach it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if numel(self.shape(loss)) != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for (id, _, t) in self.params.iter() {
            if t.requires_grad() {
                out.params.insert(id, vec![0.0; t.len()]);
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !self.nodes[target.0].needs_grad {
                    return;
                }
                let slot = adj[target.0]
                    .get_or_insert_with(|| vec![0.0; numel(&self.nodes[target.0].shape)]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    out.vars.insert(idx, g);
                }
                Op::Param(id) => {
                    if let Some(buf) = out.params.get_mut(id) {
                        buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = dC · Bᵀ
                    send(*a, &mut |s| {
                        gemm_acc(m, n, k, &g, n as isize, 1, bv, 1, n as isize, s)
                    });
                    // dB = Aᵀ · dC
                    send(*b, &mut |s| {
                        gemm_acc(k, m, n, av, 1, k as isize, &g, n as isize, 1, s)
                    });
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    match kind {
                        Binary::Add => {
                            send(*a, &mut |s| add_into(s, &g));
                            send(*b, &mut |s| add_into(s, &g));
                        }
                        Binary::Sub => {
                            send(*a, &mut |s| add_into(s, &g));
                            send(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                        }
                        Binary::Mul => {
                            send(*a, &mut |s| {
                                for i in 0..s.len() {
                                    s[i] += g[i] * bv[i];
                                }
                            });
                            send(*b, &mut |s| {
                                for i in 0..s.len() {
                                    s[i] += g[i] * av[i];
                                }
                            });
                        }
                    }
                }
                Op::BinaryScalar(kind, t, sc, scalar_left) => {
                    let (tv, sv) = (self.value(*t), self.value(*sc)[0]);
                    // d out / d tensor, d out / d scalar per element
                    let (dt, ds): (f64, Vec<f64>) = match (kind, scalar_left) {
                        (Binary::Add, _) => (1.0, vec![1.0; tv.len()]),
                        (Binary::Sub, false) => (1.0, vec![-1.0; tv.len()]),
                        (Binary::Sub, true) => (-1.0, vec![1.0; tv.len()]),
                        (Binary::Mul, _) => (sv, tv.to_vec()),
                    };
                    send(*t, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y * dt));
                    let total: f64 = g.iter().zip(&ds).map(|(a, b)| a * b).sum();
                    send(*sc, &mut |s| s[0] += total);
                }
                Op::Scale(a, f) => {
                    send(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y * f));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    send(*a, &mut |s| {
                        for i in 0..s.len() {
                            if x[i] > *lo && x[i] < *hi {
                                s[i] += g[i];
                            }
                        }
                    });
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    send(*a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i]
                                * match kind {
                                    Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                    Unary::Tanh => 1.0 - y[i] * y[i],
                                    Unary::Log => 1.0 / x[i],
                                    Unary::Exp => y[i],
                                    Unary::Square => 2.0 * x[i],
                                };
                        }
                    });
                }
                Op::AddRow(a, bias) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    send(*a, &mut |s| add_into(s, &g));
                    send(*bias, &mut |s| {
                        for r in 0..m {
                            add_into(s, &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::ScaleRows(a, w) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    let (av, wv) = (self.value(*a), self.value(*w));
                    send(*a, &mut |s| {
                        for r in 0..m {
                            for c in 0..n {
                                s[r * n + c] += g[r * n + c] * wv[r];
                            }
                        }
                    });
                    send(*w, &mut |s| {
                        for r in 0..m {
                            s[r] += (0..n).map(|c| g[r * n + c] * av[r * n + c]).sum::<f64>();
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    let y = &node.value;
                    send(*a, &mut |s| {
                        for r in 0..m {
                            let row = r * n..(r + 1) * n;
                            let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                            for i in row {
                                s[i] += y[i] * (g[i] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    let y = &node.value;
                    send(*a, &mut |s| {
                        for r in 0..m {
                            let row = r * n..(r + 1) * n;
                            let gs: f64 = g[row.clone()].iter().sum();
                            for i in row {
                                s[i] += g[i] - libm::exp(y[i]) * gs;
                            }
                        }
                    });
                }
                Op::GatherRows(table, ids) => {
                    let d = self.shape(*table)[1];
                    send(*table, &mut |s| {
                        for (r, &i) in ids.iter().enumerate() {
                            add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::Pick(a, idx) => {
                    let (_, n) = rows_cols(self.shape(*a));
                    send(*a, &mut |s| {
                        for (r, &c) in idx.iter().enumerate() {
                            s[r * n + c] += g[r];
                        }
                    });
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    let len = node.shape[1];
                    send(*a, &mut |s| {
                        for r in 0..m {
                            add_into(&mut s[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                        }
                    });
                }
                Op::Sum(a) => {
                    send(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::SumCols(a) => {
                    let (m, n) = rows_cols(self.shape(*a));
                    send(*a, &mut |s| {
                        for r in 0..m {
                            s[r * n..(r + 1) * n].iter_mut().for_each(|x| *x += g[r]);
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
