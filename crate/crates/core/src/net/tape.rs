//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! information to push adjoints back to its inputs. Nodes are created in
//! topological order, so the backward sweep is a single reverse pass.
//!
//! Arrays are treated as 2-D matrices `[rows, cols]` (see
//! [`NumArray::rows`]); row vectors are `[1, n]`.
//!
//! ```
//! use diffpolicy::net::{NumArray, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.constant(NumArray::row(vec![1.0, 2.0, 3.0]));
//! let w = tape.leaf(NumArray::row(vec![0.5, -1.0, 2.0]));
//! let y = (x * w).sum();
//! let grads = tape.backward(y);
//! assert_eq!(y.scalar(), 4.5);
//! assert_eq!(grads.wrt(w).unwrap(), &[1.0, 2.0, 3.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::{NumArray, ParamStore};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Silu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Softmax(usize),
    LogSoftmax(usize),
    Gather { table: usize, idx: Vec<usize> },
    RepeatRows { x: usize, times: usize },
    Reshape(usize),
    SeqAttention { q: usize, k: usize, v: usize, seq_len: usize, probs: Vec<f64> },
    SparseSum { x: usize, terms: Vec<(usize, usize, f64)> },
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
}

struct Node {
    value: Arc<NumArray>,
    op: Op,
}

/// Gradient sink for one bound parameter store.
struct Binding {
    trainable: bool,
    leaves: HashMap<String, usize>,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<Binding>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// A parameter store attached to a tape; parameter lookups become leaves.
#[derive(Clone, Copy)]
pub struct Bound<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    slot: usize,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, String, usize)>,
}

fn row_col(a: &NumArray) -> (usize, usize) {
    (a.rows(), a.cols())
}

fn shape2(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `log(sum(exp(x)))` with max subtraction.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: NumArray, op: Op) -> Var<'_> {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&self, value: Arc<NumArray>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn val(&self, id: usize) -> Arc<NumArray> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// A differentiable input not tied to any parameter store.
    pub fn leaf(&self, value: NumArray) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A constant input. Its adjoint is computed but never exported.
    pub fn constant(&self, value: NumArray) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(NumArray::new(vec![1, 1], vec![x]).unwrap())
    }

    /// Attaches a parameter store. With `trainable`, gradients of its leaves
    /// are reported by [`Gradients::accumulate_into`].
    pub fn bind<'t, 'p>(&'t self, store: &'p ParamStore, trainable: bool) -> Bound<'t, 'p> {
        let mut b = self.bindings.borrow_mut();
        b.push(Binding { trainable, leaves: HashMap::new() });
        Bound { tape: self, store, slot: b.len() - 1 }
    }

    /// Runs the backward sweep from a scalar output.
    pub fn backward(&self, out: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[out.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
            match &mut grads[id] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for id in (0..=out.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = row_col(av);
                    let n = bv.cols();
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(&dy, &bt, m, n, k);
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, &dy, k, m, n);
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Transpose(a) => {
                    let (r, c) = row_col(y);
                    let da = transpose_raw(&dy, r, c);
                    acc(&mut grads, *a, &da);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &dy);
                    acc(&mut grads, *b, &dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &dy);
                    let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                    acc(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let da: Vec<f64> = dy.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = dy.iter().zip(av).map(|(g, a)| g * a).collect();
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::AddRow(a, row) => {
                    let c = y.cols();
                    let mut drow = vec![0.0; c];
                    for chunk in dy.chunks(c) {
                        drow.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    acc(&mut grads, *a, &dy);
                    acc(&mut grads, *row, &drow);
                }
                Op::MulRow(a, row) => {
                    let c = y.cols();
                    let av = nodes[*a].value.data();
                    let rv = nodes[*row].value.data();
                    let mut da = vec![0.0; dy.len()];
                    let mut drow = vec![0.0; c];
                    for (i, (g, x)) in dy.iter().zip(av).enumerate() {
                        let j = i % c;
                        da[i] = g * rv[j];
                        drow[j] += g * x;
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *row, &drow);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = dy.iter().map(|g| g * s).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Shift(a) => acc(&mut grads, *a, &dy),
                Op::Silu(a) => {
                    let xv = nodes[*a].value.data();
                    let da: Vec<f64> = dy
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> =
                        dy.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = dy.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::Ln(a) => {
                    let xv = nodes[*a].value.data();
                    let da: Vec<f64> = dy.iter().zip(xv).map(|(g, x)| g / x).collect();
                    acc(&mut grads, *a, &da);
                }
                Op::LayerNorm { x, inv_std } => {
                    let c = y.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let g = &dy[r * c..(r + 1) * c];
                        let yr = y.row_slice(r);
                        let mean_g = g.iter().sum::<f64>() / c as f64;
                        let mean_gy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = is * (g[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for r in 0..y.rows() {
                        let g = &dy[r * c..(r + 1) * c];
                        let p = y.row_slice(r);
                        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = p[j] * (g[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, &dx);
                }
                Op::LogSoftmax(a) => {
                    let c = y.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for r in 0..y.rows() {
                        let g = &dy[r * c..(r + 1) * c];
                        let ly = y.row_slice(r);
                        let gs: f64 = g.iter().sum();
                        for j in 0..c {
                            dx[r * c + j] = g[j] - ly[j].exp() * gs;
                        }
                    }
                    acc(&mut grads, *a, &dx);
                }
                Op::Gather { table, idx } => {
                    let tv = &nodes[*table].value;
                    let c = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dt[i * c + j] += dy[r * c + j];
                        }
                    }
                    acc(&mut grads, *table, &dt);
                }
                Op::RepeatRows { x, times } => {
                    let xv = &nodes[*x].value;
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..xv.rows() {
                        for t in 0..*times {
                            let src = (r * times + t) * c;
                            for j in 0..c {
                                dx[r * c + j] += dy[src + j];
                            }
                        }
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::Reshape(a) => acc(&mut grads, *a, &dy),
                Op::SeqAttention { q, k, v, seq_len, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        nodes[*q].value.data(),
                        nodes[*k].value.data(),
                        nodes[*v].value.data(),
                        probs,
                        &dy,
                        y.cols(),
                        *seq_len,
                    );
                    acc(&mut grads, *q, &dq);
                    acc(&mut grads, *k, &dk);
                    acc(&mut grads, *v, &dv);
                }
                Op::SparseSum { x, terms } => {
                    let mut dx = vec![0.0; nodes[*x].value.len()];
                    for &(out, src, w) in terms {
                        dx[src] += w * dy[out];
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = nodes[*x].value.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v < *lo || v > *hi { 0.0 } else { *g })
                        .collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::Minimum(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let mut da = vec![0.0; dy.len()];
                    let mut db = vec![0.0; dy.len()];
                    for i in 0..dy.len() {
                        if av[i] <= bv[i] {
                            da[i] = dy[i];
                        } else {
                            db[i] = dy[i];
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
            }
            grads[id] = Some(dy);
        }

        let bindings = self.bindings.borrow();
        let mut params = Vec::new();
        for (slot, b) in bindings.iter().enumerate() {
            if b.trainable {
                for (name, &id) in &b.leaves {
                    params.push((slot, name.clone(), id));
                }
            }
        }
        params.sort();
        Gradients { grads, params }
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    seq_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rows = q.len() / d;
    let blocks = rows / seq_len;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; blocks * seq_len * seq_len];
    for b in 0..blocks {
        let base = b * seq_len;
        for i in 0..seq_len {
            let qi = &q[(base + i) * d..(base + i + 1) * d];
            let prow = &mut probs[(b * seq_len + i) * seq_len..(b * seq_len + i + 1) * seq_len];
            for j in 0..seq_len {
                let kj = &k[(base + j) * d..(base + j + 1) * d];
                prow[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let sm = softmax_row(prow);
            prow.copy_from_slice(&sm);
            let orow = &mut out[(base + i) * d..(base + i + 1) * d];
            for j in 0..seq_len {
                let p = prow[j];
                let vj = &v[(base + j) * d..(base + j + 1) * d];
                orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
    seq_len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = q.len() / d;
    let blocks = rows / seq_len;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq_len];
    for b in 0..blocks {
        let base = b * seq_len;
        for i in 0..seq_len {
            let prow = &probs[(b * seq_len + i) * seq_len..(b * seq_len + i + 1) * seq_len];
            let go = &dout[(base + i) * d..(base + i + 1) * d];
            for j in 0..seq_len {
                let vj = &v[(base + j) * d..(base + j + 1) * d];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dv[(base + j) * d..(base + j + 1) * d];
                dvj.iter_mut().zip(go).for_each(|(a, g)| *a += prow[j] * g);
            }
            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
            for j in 0..seq_len {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dq[(base + i) * d + c] += ds * k[(base + j) * d + c];
                    dk[(base + j) * d + c] += ds * q[(base + i) * d + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<NumArray> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    /// The single value of a one-element node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on a node with {} values", v.len());
        v.data()[0]
    }

    fn unary(self, f: impl Fn(&NumArray) -> (NumArray, Op)) -> Var<'t> {
        let x = self.value();
        let (out, op) = f(&x);
        self.tape.push(out, op)
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = NumArray::new(x.shape().to_vec(), data).unwrap();
        self.tape.push(out, op)
    }

    fn zip(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.len(), b.len(), "elementwise op on {:?} and {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = NumArray::new(a.shape().to_vec(), data).unwrap();
        self.tape.push(out, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (m, k) = row_col(&a);
        let (k2, n) = row_col(&b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        self.tape.push(NumArray::new(shape2(m, n), data).unwrap(), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let (r, c) = row_col(a);
            (NumArray::new(shape2(c, r), transpose_raw(a.data(), r, c)).unwrap(), Op::Transpose(id))
        })
    }

    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let r = row.value();
        let c = a.cols();
        assert_eq!(r.len(), c, "add_row: row has {} values, matrix has {c} cols", r.len());
        let data = a.data().iter().enumerate().map(|(i, &x)| x + r.data()[i % c]).collect();
        let out = NumArray::new(shape2(a.rows(), c), data).unwrap();
        self.tape.push(out, Op::AddRow(self.id, row.id))
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let r = row.value();
        let c = a.cols();
        assert_eq!(r.len(), c, "mul_row: row has {} values, matrix has {c} cols", r.len());
        let data = a.data().iter().enumerate().map(|(i, &x)| x * r.data()[i % c]).collect();
        let out = NumArray::new(shape2(a.rows(), c), data).unwrap();
        self.tape.push(out, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.map(|x| x * s, Op::Scale(self.id, s))
    }

    /// `self + c` elementwise.
    pub fn shift(self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::Shift(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.map(|x| x * sigmoid(x), Op::Silu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, Op::Ln(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(|x| x.clamp(lo, hi), Op::Clamp { x: self.id, lo, hi })
    }

    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, f64::min, Op::Minimum(self.id, other.id))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            let mut inv_std = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let x = a.row_slice(r);
                let mean = x.iter().sum::<f64>() / c as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..c {
                    out[r * c + j] = (x[j] - mean) * is;
                }
                inv_std.push(is);
            }
            (NumArray::new(a.shape().to_vec(), out).unwrap(), Op::LayerNorm { x: id, inv_std })
        })
    }

    pub fn softmax(self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let mut out = Vec::with_capacity(a.len());
            for r in 0..a.rows() {
                out.extend(softmax_row(a.row_slice(r)));
            }
            (NumArray::new(a.shape().to_vec(), out).unwrap(), Op::Softmax(id))
        })
    }

    pub fn log_softmax(self) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let mut out = Vec::with_capacity(a.len());
            for r in 0..a.rows() {
                let row = a.row_slice(r);
                let lse = logsumexp(row);
                out.extend(row.iter().map(|v| v - lse));
            }
            (NumArray::new(a.shape().to_vec(), out).unwrap(), Op::LogSoftmax(id))
        })
    }

    /// Selects rows of an embedding table.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let id = self.id;
        let idx = idx.to_vec();
        self.unary(move |t| {
            let c = t.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in &idx {
                out.extend_from_slice(t.row_slice(i));
            }
            let out = NumArray::new(shape2(idx.len(), c), out).unwrap();
            (out, Op::Gather { table: id, idx: idx.clone() })
        })
    }

    /// Repeats each row `times` times consecutively: `[B, c] -> [B*times, c]`.
    pub fn repeat_rows(self, times: usize) -> Var<'t> {
        let id = self.id;
        self.unary(|a| {
            let c = a.cols();
            let mut out = Vec::with_capacity(a.len() * times);
            for r in 0..a.rows() {
                for _ in 0..times {
                    out.extend_from_slice(a.row_slice(r));
                }
            }
            (NumArray::new(shape2(a.rows() * times, c), out).unwrap(), Op::RepeatRows { x: id, times })
        })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let id = self.id;
        self.unary(|a| ((*a).clone().reshaped(shape2(rows, cols)).unwrap(), Op::Reshape(id)))
    }

    /// Single-head scaled dot-product attention applied independently to
    /// consecutive blocks of `seq_len` rows.
    pub fn seq_attention(self, k: Var<'t>, v: Var<'t>, seq_len: usize) -> Var<'t> {
        let qv = self.value();
        let kv = k.value();
        let vv = v.value();
        let d = qv.cols();
        assert_eq!(qv.rows() % seq_len, 0, "rows not a multiple of seq_len");
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), d, seq_len);
        self.tape.push(
            NumArray::new(shape2(qv.rows(), d), out).unwrap(),
            Op::SeqAttention { q: self.id, k: k.id, v: v.id, seq_len, probs },
        )
    }

    /// `out[o] = Σ w * x[src]` over `(o, src, w)` terms, flat indices into
    /// `x`; output is a `[1, n_out]` row.
    pub fn sparse_sum(self, n_out: usize, terms: Vec<(usize, usize, f64)>) -> Var<'t> {
        let x = self.value();
        let mut out = vec![0.0; n_out];
        for &(o, s, w) in &terms {
            out[o] += w * x.data()[s];
        }
        self.tape.push(NumArray::row(out), Op::SparseSum { x: self.id, terms })
    }

    /// Selects individual elements by flat index into a `[1, n]` row.
    pub fn pick(self, idx: &[usize]) -> Var<'t> {
        let terms = idx.iter().enumerate().map(|(o, &s)| (o, s, 1.0)).collect();
        self.sparse_sum(idx.len(), terms)
    }

    pub fn sum(self) -> Var<'t> {
        let n = self.value().len();
        self.sparse_sum(1, (0..n).map(|i| (0, i, 1.0)).collect())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sparse_sum(1, (0..n).map(|i| (0, i, 1.0 / n as f64)).collect())
    }

    /// Σ w_i x_i over a flat array.
    pub fn dot_const(self, w: &[f64]) -> Var<'t> {
        assert_eq!(self.value().len(), w.len());
        self.sparse_sum(1, w.iter().enumerate().map(|(i, &wi)| (0, i, wi)).collect())
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.zip(rhs, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.zip(rhs, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.zip(rhs, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

impl<'t, 'p> Bound<'t, 'p> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    /// Leaf for the named parameter, created once per tape and binding.
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(&id) = self.tape.bindings.borrow()[self.slot].leaves.get(name) {
            return Ok(Var { tape: self.tape, id });
        }
        let shared = self.store.param(name)?.shared();
        let var = self.tape.push_shared(shared, Op::Leaf);
        self.tape.bindings.borrow_mut()[self.slot].leaves.insert(name.to_string(), var.id);
        Ok(var)
    }

    /// `x W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        Ok(x.matmul(w).add_row(b))
    }
}

impl Gradients {
    /// Adjoint of any node, if it was reached by the backward sweep.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter leaf of binding `slot` into
    /// `store`'s accumulators.
    pub fn accumulate_into(&self, slot: usize, store: &mut ParamStore) -> Result<()> {
        for (s, name, id) in &self.params {
            if *s != slot {
                continue;
            }
            if let Some(g) = &self.grads[*id] {
                store.add_grad(name, g)?;
            }
        }
        Ok(())
    }
}
