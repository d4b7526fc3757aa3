//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Define-by-run: each forward pass records its operations into a fresh
//! [`Graph`]; [`Graph::backward`] replays them in reverse. Node ids are
//! creation-ordered, so every parent id is smaller than its child id and the
//! reverse id order is a valid topological order.
//!
//! Broadcasting is limited to row vectors (1 x c), column vectors (r x 1) and
//! scalars against full matrices. `round_ste` rounds half-to-even in the
//! forward pass and passes gradients straight through; combined with `clip`
//! this yields the usual straight-through quantizer gradient, including the
//! scale gradient when the scale participates in the division.

use std::cell::RefCell;

use crate::tensor::{invert, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`]. Cheap to copy; tied to the graph by
/// lifetime.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Sqrt(usize),
    Square(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Scale(usize, f64),
    Clip(usize, f64, f64),
    RoundSte(usize),
    Matmul(usize, usize),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    MeanAll(usize),
    SumAll(usize),
    MeanRows(usize),
    RepeatCols(usize, usize),
    SoftmaxRows(usize),
    EmbedRows(usize, Vec<u32>),
    CrossEntropyRows(usize, Vec<u32>),
    KlTeacherRows(usize, Tensor, f64),
    Inverse(usize),
    Kron(usize, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

fn add_adj(adj: &mut [Option<Tensor>], nodes: &[Node], pid: usize, delta: Tensor) {
    if !nodes[pid].requires_grad {
        return;
    }
    match &mut adj[pid] {
        Some(t) => {
            t.axpy(1.0, &delta).expect("gradient shape mismatch");
        }
        None => adj[pid] = Some(delta),
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Result<usize> {
        if x == y {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else if y == 1 {
            Ok(x)
        } else {
            Err(Error::Dim(format!(
                "incompatible broadcast shapes {a:?} vs {b:?}"
            )))
        }
    };
    Ok([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let [r, c] = broadcast_shape(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let ia = if a.rows() == 1 { 0 } else { i };
        let ib = if b.rows() == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if a.cols() == 1 { 0 } else { j };
            let jb = if b.cols() == 1 { 0 } else { j };
            out.set(i, j, f(a.get(ia, ja), b.get(ib, jb)));
        }
    }
    Ok(out)
}

/// Sum `g` down to `shape`, undoing broadcasting.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..g.rows() {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if shape[1] == 1 { 0 } else { j };
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

/// Round half-to-even, matching IEEE "round to nearest, ties to even".
pub fn round_half_even(x: f64) -> f64 {
    let f = x.floor();
    let diff = x - f;
    if diff > 0.5 {
        f + 1.0
    } else if diff < 0.5 {
        f
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    }
}

fn softmax_rows_val(z: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut tmp = vec![0.0; z.cols()];
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            tmp[j] = e;
            sum += e;
        }
        for (j, e) in tmp.iter().enumerate() {
            out.set(i, j, e / sum);
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        // Leaves may hold anything (e.g. additive masks); ops must stay finite.
        if !matches!(op, Op::Leaf) {
            value.check_finite("graph op output")?;
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, grad: None, op, requires_grad });
        Ok(Var { graph: self, id })
    }

    /// Leaf that does not collect gradients.
    pub fn constant(&self, t: Tensor) -> Result<Var<'_>> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that collects gradients.
    pub fn param(&self, t: Tensor) -> Result<Var<'_>> {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Backpropagate from a scalar root. Leaf gradients accumulate across
    /// repeated calls and persist until the graph is dropped; intermediate
    /// adjoints are per-call scratch.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::Contract(
                "backward requires a scalar-valued root".into(),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.id + 1];
        adj[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(t) => {
                        t.axpy(1.0, &g).expect("gradient shape mismatch");
                    }
                    None => node.grad = Some(g),
                }
                continue;
            }
            let nodes_ref: &Vec<Node> = &nodes;
            let val = &nodes_ref[id].value;
            match &nodes_ref[id].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let sa = nodes_ref[*a].value.shape();
                    let sb = nodes_ref[*b].value.shape();
                    add_adj(&mut adj, nodes_ref, *a, reduce_to(&g, sa));
                    add_adj(&mut adj, nodes_ref, *b, reduce_to(&g, sb));
                }
                Op::Sub(a, b) => {
                    let sa = nodes_ref[*a].value.shape();
                    let sb = nodes_ref[*b].value.shape();
                    add_adj(&mut adj, nodes_ref, *a, reduce_to(&g, sa));
                    add_adj(&mut adj, nodes_ref, *b, reduce_to(&g.scale(-1.0), sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes_ref[*a].value.clone(), nodes_ref[*b].value.clone());
                    let da = broadcast_apply(&g, &vb, |x, y| x * y)?;
                    let db = broadcast_apply(&g, &va, |x, y| x * y)?;
                    add_adj(&mut adj, nodes_ref, *a, reduce_to(&da, va.shape()));
                    add_adj(&mut adj, nodes_ref, *b, reduce_to(&db, vb.shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (nodes_ref[*a].value.clone(), nodes_ref[*b].value.clone());
                    let da = broadcast_apply(&g, &vb, |x, y| x / y)?;
                    let ratio = broadcast_apply(&va, &vb, |x, y| x / (y * y))?;
                    let db = broadcast_apply(&g, &ratio, |x, y| -x * y)?;
                    add_adj(&mut adj, nodes_ref, *a, reduce_to(&da, va.shape()));
                    add_adj(&mut adj, nodes_ref, *b, reduce_to(&db, vb.shape()));
                }
                Op::Neg(a) => add_adj(&mut adj, nodes_ref, *a, g.scale(-1.0)),
                Op::Sqrt(a) => {
                    // val = sqrt(x), d/dx = 1/(2 sqrt(x))
                    let d = val.zip_map(&g, |s, gi| gi * 0.5 / s)?;
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::Square(a) => {
                    let va = nodes_ref[*a].value.clone();
                    add_adj(&mut adj, nodes_ref, *a, va.zip_map(&g, |x, gi| 2.0 * x * gi)?);
                }
                Op::Exp(a) => add_adj(&mut adj, nodes_ref, *a, val.zip_map(&g, |e, gi| e * gi)?),
                Op::Ln(a) => {
                    let va = nodes_ref[*a].value.clone();
                    add_adj(&mut adj, nodes_ref, *a, va.zip_map(&g, |x, gi| gi / x)?);
                }
                Op::Sigmoid(a) => add_adj(&mut adj, nodes_ref, *a, val.zip_map(&g, |s, gi| s * (1.0 - s) * gi)?),
                Op::Scale(a, k) => add_adj(&mut adj, nodes_ref, *a, g.scale(*k)),
                Op::Clip(a, lo, hi) => {
                    let va = nodes_ref[*a].value.clone();
                    let d = va.zip_map(&g, |x, gi| if x >= *lo && x <= *hi { gi } else { 0.0 })?;
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::RoundSte(a) => add_adj(&mut adj, nodes_ref, *a, g.clone()),
                Op::Matmul(a, b) => {
                    let (va, vb) = (nodes_ref[*a].value.clone(), nodes_ref[*b].value.clone());
                    add_adj(&mut adj, nodes_ref, *a, g.matmul(&vb.transpose())?);
                    add_adj(&mut adj, nodes_ref, *b, va.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => add_adj(&mut adj, nodes_ref, *a, g.transpose()),
                Op::SliceCols(a, start, len) => {
                    let sa = nodes_ref[*a].value.shape();
                    let mut d = Tensor::zeros(sa[0], sa[1]);
                    for i in 0..g.rows() {
                        for j in 0..*len {
                            d.set(i, start + j, g.get(i, j));
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::ConcatCols(ids) => {
                    let mut off = 0;
                    for &pid in ids {
                        let sp = nodes_ref[pid].value.shape();
                        let mut d = Tensor::zeros(sp[0], sp[1]);
                        for i in 0..sp[0] {
                            for j in 0..sp[1] {
                                d.set(i, j, g.get(i, off + j));
                            }
                        }
                        add_adj(&mut adj, nodes_ref, pid, d);
                        off += sp[1];
                    }
                }
                Op::MeanAll(a) => {
                    let sa = nodes_ref[*a].value.shape();
                    let k = g.get(0, 0) / (sa[0] * sa[1]) as f64;
                    add_adj(&mut adj, nodes_ref, *a, Tensor::full(sa[0], sa[1], k));
                }
                Op::SumAll(a) => {
                    let sa = nodes_ref[*a].value.shape();
                    add_adj(&mut adj, nodes_ref, *a, Tensor::full(sa[0], sa[1], g.get(0, 0)));
                }
                Op::MeanRows(a) => {
                    let sa = nodes_ref[*a].value.shape();
                    let mut d = Tensor::zeros(sa[0], sa[1]);
                    for i in 0..sa[0] {
                        let gi = g.get(i, 0) / sa[1] as f64;
                        for j in 0..sa[1] {
                            d.set(i, j, gi);
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::RepeatCols(a, k) => {
                    let sa = nodes_ref[*a].value.shape();
                    let mut d = Tensor::zeros(sa[0], sa[1]);
                    for i in 0..sa[0] {
                        for j in 0..sa[1] {
                            let mut s = 0.0;
                            for r in 0..*k {
                                s += g.get(i, j * k + r);
                            }
                            d.set(i, j, s);
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    // d/dz = s * (g - <g, s>) per row, s = softmax value.
                    let mut d = Tensor::zeros(val.rows(), val.cols());
                    for i in 0..val.rows() {
                        let dot: f64 =
                            (0..val.cols()).map(|j| g.get(i, j) * val.get(i, j)).sum();
                        for j in 0..val.cols() {
                            d.set(i, j, val.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::EmbedRows(a, ids) => {
                    let sa = nodes_ref[*a].value.shape();
                    let mut d = Tensor::zeros(sa[0], sa[1]);
                    for (i, &tok) in ids.iter().enumerate() {
                        for j in 0..sa[1] {
                            let v = d.get(tok as usize, j) + g.get(i, j);
                            d.set(tok as usize, j, v);
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::CrossEntropyRows(a, targets) => {
                    let z = nodes_ref[*a].value.clone();
                    let s = softmax_rows_val(&z);
                    let valid = targets.iter().filter(|&&t| t != IGNORE_TOKEN).count().max(1);
                    let k = g.get(0, 0) / valid as f64;
                    let mut d = Tensor::zeros(z.rows(), z.cols());
                    for (i, &tgt) in targets.iter().enumerate() {
                        if tgt == IGNORE_TOKEN {
                            continue;
                        }
                        for j in 0..z.cols() {
                            let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
                            d.set(i, j, k * (s.get(i, j) - onehot));
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::KlTeacherRows(a, p, tau) => {
                    let z = nodes_ref[*a].value.clone();
                    let scaled = z.scale(1.0 / tau);
                    let q = softmax_rows_val(&scaled);
                    let k = g.get(0, 0) / (tau * z.rows() as f64);
                    let mut d = Tensor::zeros(z.rows(), z.cols());
                    for i in 0..z.rows() {
                        for j in 0..z.cols() {
                            d.set(i, j, k * (q.get(i, j) - p.get(i, j)));
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::Inverse(a) => {
                    // val = A^-1; dA = -val^T g val^T
                    let vt = val.transpose();
                    let d = vt.matmul(&g)?.matmul(&vt)?.scale(-1.0);
                    add_adj(&mut adj, nodes_ref, *a, d);
                }
                Op::Kron(a, b) => {
                    let (va, vb) = (nodes_ref[*a].value.clone(), nodes_ref[*b].value.clone());
                    let (p, q) = (va.rows(), va.cols());
                    let (r, s) = (vb.rows(), vb.cols());
                    let mut da = Tensor::zeros(p, q);
                    let mut db = Tensor::zeros(r, s);
                    for i in 0..p {
                        for j in 0..q {
                            let aij = va.get(i, j);
                            let mut sa = 0.0;
                            for k in 0..r {
                                for l in 0..s {
                                    let gv = g.get(i * r + k, j * s + l);
                                    sa += gv * vb.get(k, l);
                                    let v = db.get(k, l) + gv * aij;
                                    db.set(k, l, v);
                                }
                            }
                            da.set(i, j, sa);
                        }
                    }
                    add_adj(&mut adj, nodes_ref, *a, da);
                    add_adj(&mut adj, nodes_ref, *b, db);
                }
            }
        }
        Ok(())
    }
}

/// Row index sentinel excluded from cross-entropy averaging.
pub const IGNORE_TOKEN: u32 = u32::MAX;

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    fn bin(
        self,
        rhs: Var<'g>,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let v = broadcast_apply(&nodes[self.id].value, &nodes[rhs.id].value, f)?;
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        self.graph.push(v, op(self.id, rhs.id), rg)
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.bin(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.bin(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.bin(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>> {
        {
            let nodes = self.graph.nodes.borrow();
            if nodes[rhs.id].value.data().iter().any(|&x| x == 0.0) {
                return Err(Error::Numeric("division by zero".into()));
            }
        }
        self.bin(rhs, Op::Div, |a, b| a / b)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            (nodes[self.id].value.map(f), nodes[self.id].requires_grad)
        };
        self.graph.push(v, op, rg)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn scale(self, k: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn clip(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        if lo > hi {
            return Err(Error::Param(format!("clip bounds inverted: [{lo}, {hi}]")));
        }
        self.unary(Op::Clip(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Round to nearest (ties to even) with a straight-through gradient.
    pub fn round_ste(self) -> Result<Var<'g>> {
        self.unary(Op::RoundSte(self.id), round_half_even)
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let v = nodes[self.id].value.matmul(&nodes[rhs.id].value)?;
            (v, nodes[self.id].requires_grad || nodes[rhs.id].requires_grad)
        };
        self.graph.push(v, Op::Matmul(self.id, rhs.id), rg)
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            (
                nodes[self.id].value.transpose(),
                nodes[self.id].requires_grad,
            )
        };
        self.graph.push(v, Op::Transpose(self.id), rg)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id].value;
            if start + len > src.cols() {
                return Err(Error::Dim(format!(
                    "slice_cols [{start}, {}) out of {} columns",
                    start + len,
                    src.cols()
                )));
            }
            let mut v = Tensor::zeros(src.rows(), len);
            for i in 0..src.rows() {
                for j in 0..len {
                    v.set(i, j, src.get(i, start + j));
                }
            }
            (v, nodes[self.id].requires_grad)
        };
        self.graph.push(v, Op::SliceCols(self.id, start, len), rg)
    }

    pub fn mean_all(self) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            (
                Tensor::scalar(nodes[self.id].value.mean()),
                nodes[self.id].requires_grad,
            )
        };
        self.graph.push(v, Op::MeanAll(self.id), rg)
    }

    pub fn sum_all(self) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            (
                Tensor::scalar(nodes[self.id].value.sum()),
                nodes[self.id].requires_grad,
            )
        };
        self.graph.push(v, Op::SumAll(self.id), rg)
    }

    /// Per-row mean as an r x 1 column.
    pub fn mean_rows(self) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut v = Tensor::zeros(src.rows(), 1);
            for i in 0..src.rows() {
                v.set(i, 0, src.row(i).iter().sum::<f64>() / src.cols() as f64);
            }
            (v, nodes[self.id].requires_grad)
        };
        self.graph.push(v, Op::MeanRows(self.id), rg)
    }

    /// Repeat every column k times consecutively: 1 x g -> 1 x (g*k).
    pub fn repeat_cols(self, k: usize) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut v = Tensor::zeros(src.rows(), src.cols() * k);
            for i in 0..src.rows() {
                for j in 0..src.cols() {
                    for r in 0..k {
                        v.set(i, j * k + r, src.get(i, j));
                    }
                }
            }
            (v, nodes[self.id].requires_grad)
        };
        self.graph.push(v, Op::RepeatCols(self.id, k), rg)
    }

    pub fn softmax_rows(self) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            (
                softmax_rows_val(&nodes[self.id].value),
                nodes[self.id].requires_grad,
            )
        };
        self.graph.push(v, Op::SoftmaxRows(self.id), rg)
    }

    /// Gather rows of `self` (a table) by token id.
    pub fn embed_rows(self, ids: &[u32]) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let table = &nodes[self.id].value;
            let mut v = Tensor::zeros(ids.len(), table.cols());
            for (i, &tok) in ids.iter().enumerate() {
                if tok as usize >= table.rows() {
                    return Err(Error::Contract(format!(
                        "token id {tok} out of vocabulary {}",
                        table.rows()
                    )));
                }
                for j in 0..table.cols() {
                    v.set(i, j, table.get(tok as usize, j));
                }
            }
            (v, nodes[self.id].requires_grad)
        };
        self.graph.push(v, Op::EmbedRows(self.id, ids.to_vec()), rg)
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// [`IGNORE_TOKEN`].
    pub fn cross_entropy_rows(self, targets: &[u32]) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let z = &nodes[self.id].value;
            if targets.len() != z.rows() {
                return Err(Error::Dim("one target per logits row required".into()));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for (i, &tgt) in targets.iter().enumerate() {
                if tgt == IGNORE_TOKEN {
                    continue;
                }
                let row = z.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                total += lse - row[tgt as usize];
                count += 1;
            }
            (
                Tensor::scalar(total / count.max(1) as f64),
                nodes[self.id].requires_grad,
            )
        };
        self.graph
            .push(v, Op::CrossEntropyRows(self.id, targets.to_vec()), rg)
    }

    /// Mean over rows of KL(p_row || softmax(z_row / tau)) for a fixed
    /// teacher distribution `p` (rows sum to 1; zero entries are skipped).
    pub fn kl_vs_teacher_rows(self, p: &Tensor, tau: f64) -> Result<Var<'g>> {
        if tau <= 0.0 {
            return Err(Error::Param("kl temperature must be positive".into()));
        }
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let z = &nodes[self.id].value;
            if p.shape() != z.shape() {
                return Err(Error::Dim("teacher/student logits shape mismatch".into()));
            }
            let mut total = 0.0;
            for i in 0..z.rows() {
                let row = z.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
                let lse = m
                    + row
                        .iter()
                        .map(|&x| (x / tau - m).exp())
                        .sum::<f64>()
                        .ln();
                for j in 0..z.cols() {
                    let pj = p.get(i, j);
                    if pj > 0.0 {
                        let logq = row[j] / tau - lse;
                        total += pj * (pj.ln() - logq);
                    }
                }
            }
            (
                Tensor::scalar(total / z.rows().max(1) as f64),
                nodes[self.id].requires_grad,
            )
        };
        self.graph
            .push(v, Op::KlTeacherRows(self.id, p.clone(), tau), rg)
    }

    pub fn inverse(self) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            (
                invert(&nodes[self.id].value)?,
                nodes[self.id].requires_grad,
            )
        };
        self.graph.push(v, Op::Inverse(self.id), rg)
    }

    /// Kronecker product: (p x q) kron (r x s) -> (pr x qs).
    pub fn kron(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (v, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let mut v = Tensor::zeros(a.rows() * b.rows(), a.cols() * b.cols());
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    let aij = a.get(i, j);
                    for k in 0..b.rows() {
                        for l in 0..b.cols() {
                            v.set(i * b.rows() + k, j * b.cols() + l, aij * b.get(k, l));
                        }
                    }
                }
            }
            (
                v,
                nodes[self.id].requires_grad || nodes[rhs.id].requires_grad,
            )
        };
        self.graph.push(v, Op::Kron(self.id, rhs.id), rg)
    }
}


/// Concatenate 2-D vars along columns.
pub fn concat_cols<'g>(graph: &'g Graph, parts: &[Var<'g>]) -> Result<Var<'g>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero parts".into()));
    }
    let nodes = graph.nodes.borrow();
    let rows = nodes[parts[0].id].value.rows();
    let total: usize = parts
        .iter()
        .map(|p| nodes[p.id].value.cols())
        .sum();
    let mut v = Tensor::zeros(rows, total);
    let mut off = 0;
    let mut rg = false;
    for p in parts {
        let t = &nodes[p.id].value;
        if t.rows() != rows {
            return Err(Error::Dim("concat_cols row mismatch".into()));
        }
        for i in 0..rows {
            for j in 0..t.cols() {
                v.set(i, off + j, t.get(i, j));
            }
        }
        rg |= nodes[p.id].requires_grad;
        off += t.cols();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    drop(nodes);
    graph.push(v, Op::ConcatCols(ids), rg)
}
