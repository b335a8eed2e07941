//! Vector-valued reverse-mode tape.
//!
//! Every node holds a flat `Vec<f64>`. Matrices only appear as parameters,
//! which are read in place from the borrowed [`ParamStore`] and never copied
//! onto the tape. A graph is built per evaluation and is not shared between
//! threads; the store it borrows may be shared freely.

use crate::diffcore::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRow(ParamId, usize),
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Node,
    },
    MatVecCols {
        w: ParamId,
        col: usize,
        x: Node,
    },
    VecMat {
        x: Node,
        w: ParamId,
    },
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Scale(Node, f64),
    Relu(Node),
    Tanh(Node),
    Sigmoid(Node),
    Concat(Vec<Node>),
    Slice {
        x: Node,
        start: usize,
    },
    Sum(Node),
    Mean(Node),
    SumOf(Vec<Node>),
    Softmax(Node),
    CrossEntropy {
        logits: Node,
        target: usize,
    },
    Mse(Node, Node),
    Mae(Node, Node),
    NllGaussian {
        pred: Node,
        target: Node,
    },
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    requires_grad: Vec<bool>,
    relu_margin: f64,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            ops: Vec::with_capacity(256),
            values: Vec::with_capacity(256),
            requires_grad: Vec::with_capacity(256),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Smallest |pre-activation| seen by any ReLU so far.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn value(&self, n: Node) -> &[f64] {
        &self.values[n.0]
    }

    pub fn scalar(&self, n: Node) -> f64 {
        self.values[n.0][0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, requires_grad: bool) -> Node {
        self.ops.push(op);
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        Node(self.ops.len() - 1)
    }

    fn rg(&self, n: Node) -> bool {
        self.requires_grad[n.0]
    }

    /// Constant input. Gradients never flow into it.
    pub fn input(&mut self, v: Vec<f64>) -> Node {
        self.push(Op::Leaf, v, false)
    }

    /// Copy of `n` cut off from the tape.
    pub fn detach(&mut self, n: Node) -> Node {
        let v = self.values[n.0].clone();
        self.input(v)
    }

    pub fn param(&mut self, p: ParamId) -> Node {
        let v = self.store.get(p).values.clone();
        self.push(Op::Param(p), v, true)
    }

    pub fn param_row(&mut self, p: ParamId, row: usize) -> Node {
        let v = self.store.get(p).row(row).to_vec();
        self.push(Op::ParamRow(p, row), v, true)
    }

    /// `W x + b` for `W` of shape `[out, in]`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Node) -> Node {
        let wt = self.store.get(w);
        let (rows, cols) = wt.dims2();
        let xv = &self.values[x.0];
        assert_eq!(cols, xv.len(), "affine: {} expects {} inputs", wt.name, cols);
        let mut y: Vec<f64> = wt.values.chunks_exact(cols).map(|r| dot(r, xv)).collect();
        if let Some(b) = b {
            let bv = &self.store.get(b).values;
            assert_eq!(bv.len(), rows);
            for (yi, bi) in y.iter_mut().zip(bv) {
                *yi += bi;
            }
        }
        self.push(Op::Affine { w, b, x }, y, true)
    }

    /// `W[:, col..col + len(x)] x`, a column block of a weight matrix.
    pub fn matvec_cols(&mut self, w: ParamId, col: usize, x: Node) -> Node {
        let wt = self.store.get(w);
        let (_, cols) = wt.dims2();
        let xv = &self.values[x.0];
        assert!(col + xv.len() <= cols, "matvec_cols: block exceeds {}", wt.name);
        let y = wt
            .values
            .chunks_exact(cols)
            .map(|r| dot(&r[col..col + xv.len()], xv))
            .collect();
        self.push(Op::MatVecCols { w, col, x }, y, true)
    }

    /// Row vector times matrix: `x^T W` for `W` of shape `[in, out]`.
    pub fn vecmat(&mut self, x: Node, w: ParamId) -> Node {
        let wt = self.store.get(w);
        let (rows, cols) = wt.dims2();
        let xv = &self.values[x.0];
        assert_eq!(rows, xv.len(), "vecmat: {} expects {} inputs", wt.name, rows);
        let mut y = vec![0.0; cols];
        for (xi, r) in xv.iter().zip(wt.values.chunks_exact(cols)) {
            axpy(*xi, r, &mut y);
        }
        self.push(Op::VecMat { x, w }, y, true)
    }

    fn zip_with(&self, a: Node, b: Node, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.len(), bv.len(), "elementwise op on mismatched lengths");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Node {
        let v = self.values[a.0].iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn relu(&mut self, a: Node) -> Node {
        let av = &self.values[a.0];
        let margin = av.iter().fold(self.relu_margin, |m, x| m.min(x.abs()));
        let v = av.iter().map(|x| x.max(0.0)).collect();
        self.relu_margin = margin;
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        let v = self.values[a.0].iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        let v = self.values[a.0].iter().map(|x| sigmoid(*x)).collect();
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn concat(&mut self, parts: &[Node]) -> Node {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.values[p.0].len()).sum());
        for p in parts {
            v.extend_from_slice(&self.values[p.0]);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::Concat(parts.to_vec()), v, rg)
    }

    pub fn slice(&mut self, x: Node, start: usize, len: usize) -> Node {
        let v = self.values[x.0][start..start + len].to_vec();
        let rg = self.rg(x);
        self.push(Op::Slice { x, start }, v, rg)
    }

    pub fn sum(&mut self, x: Node) -> Node {
        let v = vec![self.values[x.0].iter().sum()];
        let rg = self.rg(x);
        self.push(Op::Sum(x), v, rg)
    }

    pub fn mean(&mut self, x: Node) -> Result<Node> {
        let xv = &self.values[x.0];
        if xv.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let v = vec![xv.iter().sum::<f64>() / xv.len() as f64];
        let rg = self.rg(x);
        Ok(self.push(Op::Mean(x), v, rg))
    }

    /// Elementwise sum of equal-length nodes, accumulated in the given order.
    pub fn sum_of(&mut self, parts: &[Node]) -> Result<Node> {
        let first = parts.first().ok_or(Error::EmptyInput("sum_of"))?;
        let mut v = self.values[first.0].clone();
        for p in &parts[1..] {
            let pv = &self.values[p.0];
            assert_eq!(pv.len(), v.len(), "sum_of: mismatched lengths");
            for (a, b) in v.iter_mut().zip(pv) {
                *a += b;
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::SumOf(parts.to_vec()), v, rg))
    }

    pub fn softmax(&mut self, x: Node) -> Result<Node> {
        if self.values[x.0].is_empty() {
            return Err(Error::EmptyInput("softmax"));
        }
        let v = softmax_values(&self.values[x.0]);
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x), v, rg))
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Node, target: usize) -> Result<Node> {
        let lv = &self.values[logits.0];
        if target >= lv.len() {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy target {target} out of range for {} classes",
                lv.len()
            )));
        }
        let v = vec![log_sum_exp(lv) - lv[target]];
        let rg = self.rg(logits);
        Ok(self.push(Op::CrossEntropy { logits, target }, v, rg))
    }

    fn check_pair(&self, a: Node, b: Node, what: &str) -> Result<usize> {
        let (la, lb) = (self.values[a.0].len(), self.values[b.0].len());
        if la != lb {
            return Err(Error::ShapeMismatch(format!("{what}: {la} vs {lb}")));
        }
        if la == 0 {
            return Err(Error::ShapeMismatch(format!("{what}: empty operands")));
        }
        Ok(la)
    }

    pub fn mse(&mut self, pred: Node, target: Node) -> Result<Node> {
        let n = self.check_pair(pred, target, "mse")?;
        let s: f64 = self.zip_with(pred, target, |p, t| (p - t) * (p - t)).iter().sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Mse(pred, target), vec![s / n as f64], rg))
    }

    pub fn mae(&mut self, pred: Node, target: Node) -> Result<Node> {
        let n = self.check_pair(pred, target, "mae")?;
        let s: f64 = self.zip_with(pred, target, |p, t| (p - t).abs()).iter().sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Mae(pred, target), vec![s / n as f64], rg))
    }

    /// Gaussian negative log-likelihood; `pred` is `means || log_variances`.
    pub fn nll_gaussian(&mut self, pred: Node, target: Node) -> Result<Node> {
        let (lp, lt) = (self.values[pred.0].len(), self.values[target.0].len());
        if lt == 0 || lp != 2 * lt {
            return Err(Error::ShapeMismatch(format!(
                "nll_gaussian: prediction of length {lp} cannot describe target of length {lt}"
            )));
        }
        let (pv, tv) = (&self.values[pred.0], &self.values[target.0]);
        let s: f64 = (0..lt)
            .map(|i| {
                let (mu, lv) = (pv[i], pv[lt + i]);
                let d = tv[i] - mu;
                0.5 * (lv + d * d * (-lv).exp() + LN_2PI)
            })
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::NllGaussian { pred, target }, vec![s / lt as f64], rg))
    }

    /// Reverse sweep from a scalar node. The tape is left intact, so the
    /// sweep can be repeated.
    pub fn backward(&self, loss: Node) -> Result<Gradients> {
        let n = self.values[loss.0].len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        let mut grads = Gradients::empty(self.store.len());
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) {
        let rg = &self.requires_grad;
        let mut acc = |n: Node, f: &mut dyn FnMut(&mut [f64])| {
            if !rg[n.0] {
                return;
            }
            let slot = adj[n.0].get_or_insert_with(|| vec![0.0; self.values[n.0].len()]);
            f(slot);
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Param(p) => {
                let dst = grads.slot(*p, self.store.get(*p).numel());
                axpy(1.0, g, dst);
            }
            Op::ParamRow(p, row) => {
                let t = self.store.get(*p);
                let (_, cols) = t.dims2();
                let dst = grads.slot(*p, t.numel());
                axpy(1.0, g, &mut dst[row * cols..(row + 1) * cols]);
            }
            Op::Affine { w, b, x } => {
                let wt = self.store.get(*w);
                let (_, cols) = wt.dims2();
                let xv = &self.values[x.0];
                {
                    let dw = grads.slot(*w, wt.numel());
                    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(cols)) {
                        if *gi != 0.0 {
                            axpy(*gi, xv, row);
                        }
                    }
                }
                if let Some(b) = b {
                    let db = grads.slot(*b, g.len());
                    axpy(1.0, g, db);
                }
                acc(*x, &mut |dx| {
                    for (gi, row) in g.iter().zip(wt.values.chunks_exact(cols)) {
                        if *gi != 0.0 {
                            axpy(*gi, row, dx);
                        }
                    }
                });
            }
            Op::MatVecCols { w, col, x } => {
                let wt = self.store.get(*w);
                let (_, cols) = wt.dims2();
                let xv = &self.values[x.0];
                let len = xv.len();
                {
                    let dw = grads.slot(*w, wt.numel());
                    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(cols)) {
                        if *gi != 0.0 {
                            axpy(*gi, xv, &mut row[*col..col + len]);
                        }
                    }
                }
                acc(*x, &mut |dx| {
                    for (gi, row) in g.iter().zip(wt.values.chunks_exact(cols)) {
                        if *gi != 0.0 {
                            axpy(*gi, &row[*col..col + len], dx);
                        }
                    }
                });
            }
            Op::VecMat { x, w } => {
                let wt = self.store.get(*w);
                let (_, cols) = wt.dims2();
                let xv = &self.values[x.0];
                {
                    let dw = grads.slot(*w, wt.numel());
                    for (xi, row) in xv.iter().zip(dw.chunks_exact_mut(cols)) {
                        axpy(*xi, g, row);
                    }
                }
                acc(*x, &mut |dx| {
                    for (d, row) in dx.iter_mut().zip(wt.values.chunks_exact(cols)) {
                        *d += dot(row, g);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(1.0, g, d));
                acc(*b, &mut |d| axpy(1.0, g, d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(1.0, g, d));
                acc(*b, &mut |d| axpy(-1.0, g, d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                acc(*a, &mut |d| {
                    for ((di, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *di += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((di, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *di += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| axpy(*c, g, d)),
            Op::Relu(a) => {
                let av = &self.values[a.0];
                acc(*a, &mut |d| {
                    for ((di, gi), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *di += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &self.values[i];
                acc(*a, &mut |d| {
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *di += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                acc(*a, &mut |d| {
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *di += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.values[p.0].len();
                    acc(*p, &mut |d| axpy(1.0, &g[off..off + len], d));
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                acc(*x, &mut |d| axpy(1.0, g, &mut d[*start..start + g.len()]));
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.values[x.0].len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumOf(parts) => {
                for p in parts {
                    acc(*p, &mut |d| axpy(1.0, g, d));
                }
            }
            Op::Softmax(x) => {
                let y = &self.values[i];
                let s = dot(g, y);
                acc(*x, &mut |d| {
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *di += yi * (gi - s);
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let p = softmax_values(&self.values[logits.0]);
                acc(*logits, &mut |d| {
                    for (k, (di, pk)) in d.iter_mut().zip(&p).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *di += g[0] * (pk - onehot);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let c = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |d| {
                    for ((di, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *di += c * (x - y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((di, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *di -= c * (x - y);
                    }
                });
            }
            Op::Mae(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let c = g[0] / av.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |d| {
                    for ((di, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *di += c * sign(*x, *y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((di, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *di -= c * sign(*x, *y);
                    }
                });
            }
            Op::NllGaussian { pred, target } => {
                let (pv, tv) = (&self.values[pred.0], &self.values[target.0]);
                let n = tv.len();
                let c = g[0] / n as f64;
                acc(*pred, &mut |d| {
                    for k in 0..n {
                        let (mu, lv) = (pv[k], pv[n + k]);
                        let r = tv[k] - mu;
                        let inv = (-lv).exp();
                        d[k] -= c * r * inv;
                        d[n + k] += c * 0.5 * (1.0 - r * r * inv);
                    }
                });
                acc(*target, &mut |d| {
                    for k in 0..n {
                        let r = tv[k] - pv[k];
                        d[k] += c * r * (-pv[n + k]).exp();
                    }
                });
            }
        }
    }
}

/// Parameter gradients keyed by [`ParamId`]. Only parameters reachable from
/// the loss carry an entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    fn slot(&mut self, p: ParamId, numel: usize) -> &mut [f64] {
        self.grads[p.0].get_or_insert_with(|| vec![0.0; numel])
    }

    pub fn get(&self, p: ParamId) -> Option<&[f64]> {
        self.grads[p.0].as_deref()
    }

    /// Gradient for `p`, zeros when unreachable.
    pub fn dense(&self, store: &ParamStore, p: ParamId) -> Vec<f64> {
        self.grads[p.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; store.get(p).numel()])
    }

    /// Fill every missing entry with zeros.
    pub fn densify(&mut self, store: &ParamStore) {
        for (id, t) in store.iter() {
            self.slot(id, t.numel());
        }
    }

    pub fn reachable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => axpy(1.0, src, d),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![1], vec![3.0]).unwrap();
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let one = g.input(vec![1.0]);
        let d = g.sub(xn, one);
        let sq = g.mul(d, d);
        let loss = g.sum(sq);
        assert_eq!(g.scalar(loss), 4.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
    }

    #[test]
    fn disconnected_param_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![2], vec![1.0, 2.0]).unwrap();
        let theta = store.add("theta", vec![3], vec![0.5; 3]).unwrap();
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let loss = g.sum(xn);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(theta).is_none());
        assert_eq!(grads.dense(&store, theta), vec![0.0; 3]);
        assert_eq!(grads.reachable().collect::<Vec<_>>(), vec![x]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(vec![1.0, 2.0]);
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2, 3], vec![0.1, -0.2, 0.3, 0.7, 0.2, -0.5]).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(vec![1.0, 2.0, -1.0]);
        let y = g.affine(w, None, x);
        let t = g.tanh(y);
        let loss = g.sum(t);
        let a = g.backward(loss).unwrap();
        let b = g.backward(loss).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_single_class_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(vec![3.7]);
        let ce = g.cross_entropy(l, 0).unwrap();
        assert_eq!(g.scalar(ce), 0.0);
    }

    #[test]
    fn vecmat_matches_manual() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(vec![1.0, -1.0]);
        let y = g.vecmat(x, w);
        assert_eq!(g.value(y), &[-3.0, -3.0, -3.0]);
    }
}
