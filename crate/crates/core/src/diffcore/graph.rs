//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Inputs always precede the
//! node that consumes them, so a single reverse sweep over the list visits
//! every node after all of its consumers. A fresh graph is built for each
//! forward pass; nothing is cached between passes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    SegmentSoftmax { x: Var, segments: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SegmentSum { x: Var, segments: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    ScaleRows { x: Var, s: Var },
    SqNorm(Var),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<(String, Var)>,
}

/// Gradients of a scalar loss with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Gradient of every trainable leaf, in registration order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.leaves.iter().map(move |(n, v)| {
            (
                n.as_str(),
                self.get(*v).expect("trainable leaves always receive a gradient slot"),
            )
        })
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            op,
            detail: format!("value {} at flat index {i}", data[i]),
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A named leaf that receives a gradient slot on every backward pass.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.leaves.push((name.into(), v));
        v
    }

    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn emit(&mut self, op: Op, name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(op, Tensor::from_parts(shape, data), needs))
    }

    fn require_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::shape(op, "a rank-2 tensor", shape_str(t)));
        }
        Ok(t.dims2())
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, shape_str(ta), shape_str(tb)));
        }
        Ok(())
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{k}, _] on the right of {:?}", self.value(a).shape()),
                shape_str(self.value(b)),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        self.emit(Op::MatMul(a, b), "matmul", vec![m, n], out, &[a, b])
    }

    /// Row-batched affine map `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.require_rank2("affine", x)?;
        let (dout, win) = self.require_rank2("affine", w)?;
        if din != win {
            return Err(Error::shape(
                "affine",
                format!("weight [_, {din}] for input {:?}", self.value(x).shape()),
                shape_str(self.value(w)),
            ));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [dout] {
                return Err(Error::shape("affine", format!("bias [{dout}]"), shape_str(tb)));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &xd[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                let mut acc = bd.map_or(0.0, |b| b[o]);
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += xv * wv;
                }
                out[r * dout + o] = acc;
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.emit(Op::Affine { x, w, b }, "affine", vec![n, dout], out, &inputs)
    }

    fn zip_with(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.require_same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.emit(op, name, shape, data, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    fn map(&mut self, op: Op, name: &'static str, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        self.emit(op, name, shape, data, &[x])
    }

    /// Elementwise `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(Op::ScaleShift { x, scale }, "scale_shift", x, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.scale_shift(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Relu(x), "relu", x, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Tanh(x), "tanh", x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Sigmoid(x), "sigmoid", x, sigmoid)
    }

    /// Softmax over the last axis: the whole vector for rank 1, each row for rank 2.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = if t.rank() == 1 { (1, t.len()) } else { t.dims2() };
        let mut data = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let shape = t.shape().to_vec();
        self.emit(Op::Softmax(x), "softmax", shape, data, &[x])
    }

    fn check_segments(&self, op: &'static str, x: Var, segments: &[usize], n_segments: usize) -> Result<()> {
        let rows = self.value(x).dims2().0;
        if segments.len() != rows {
            return Err(Error::shape(
                op,
                format!("{rows} segment ids"),
                format!("{} segment ids", segments.len()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::InvalidArgument(format!(
                "{op}: segment id {bad} out of range for {n_segments} segments"
            )));
        }
        Ok(())
    }

    /// Softmax of a vector within each group of entries sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        if self.value(x).rank() != 1 {
            return Err(Error::shape("segment_softmax", "a vector", shape_str(self.value(x))));
        }
        self.check_segments("segment_softmax", x, segments, n_segments)?;
        let xd = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (v, &s) in xd.iter().zip(segments) {
            max[s] = max[s].max(*v);
        }
        let mut data: Vec<f64> = xd.iter().zip(segments).map(|(v, &s)| (v - max[s]).exp()).collect();
        let mut total = vec![0.0; n_segments];
        for (v, &s) in data.iter().zip(segments) {
            total[s] += v;
        }
        for (v, &s) in data.iter_mut().zip(segments) {
            *v /= total[s];
        }
        let shape = vec![xd.len()];
        let op = Op::SegmentSoftmax {
            x,
            segments: segments.to_vec(),
        };
        self.emit(op, "segment_softmax", shape, data, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.emit(Op::Sum(x), "sum", vec![1], vec![s], &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.emit(Op::Mean(x), "mean", vec![1], vec![s], &[x])
    }

    /// Sums rows sharing a segment id; rows of the output with no members are zero.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        self.check_segments("segment_sum", x, segments, n_segments)?;
        let t = self.value(x);
        let (_, cols) = t.dims2();
        let mut data = vec![0.0; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            for (o, v) in data[s * cols..(s + 1) * cols].iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let shape = if t.rank() == 1 {
            vec![n_segments]
        } else {
            vec![n_segments, cols]
        };
        let op = Op::SegmentSum {
            x,
            segments: segments.to_vec(),
        };
        self.emit(op, "segment_sum", shape, data, &[x])
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather_rows: empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: row {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let shape = if t.rank() == 1 {
            vec![index.len()]
        } else {
            vec![index.len(), cols]
        };
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        self.emit(op, "gather_rows", shape, data, &[x])
    }

    /// Concatenation along the last axis. Vectors concatenate end to end;
    /// matrices must agree on their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?;
        let rank = self.value(first).rank();
        if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                let t = self.value(p);
                if t.rank() != 1 {
                    return Err(Error::shape("concat", "vectors", shape_str(t)));
                }
                data.extend_from_slice(t.data());
            }
            let shape = vec![data.len()];
            return self.emit(Op::Concat(parts.to_vec()), "concat", shape, data, parts);
        }
        let rows = self.require_rank2("concat", first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_rank2("concat", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat",
                    format!("[{rows}, _]"),
                    shape_str(self.value(p)),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.emit(Op::Concat(parts.to_vec()), "concat", vec![rows, total], data, parts)
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (rows, cols) = tx.dims2();
        if ts.shape() != [rows] {
            return Err(Error::shape("scale_rows", format!("[{rows}]"), shape_str(ts)));
        }
        let mut data = tx.data().to_vec();
        for (r, sv) in ts.data().iter().enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v *= sv;
            }
        }
        let shape = tx.shape().to_vec();
        self.emit(Op::ScaleRows { x, s }, "scale_rows", shape, data, &[x, s])
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sq_norm();
        self.emit(Op::SqNorm(x), "sq_norm", vec![1], vec![s], &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("{} elements", t.len()), format!("{shape:?}")));
        }
        let data = t.data().to_vec();
        self.emit(Op::Reshape(x), "reshape", shape.to_vec(), data, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every call starts from zeroed
    /// adjoints, so repeated calls are independent.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::shape("backward", "a scalar loss", shape_str(lt)));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            check_finite("backward", &g)?;
            self.propagate(node, &g, &mut adj);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for (_, v) in &self.leaves {
            if grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(self.value(*v).shape()));
            }
        }
        Ok(Gradients {
            grads,
            leaves: self.leaves.clone(),
        })
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(adj, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let dout = self.value(*w).dims2().0;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..n {
                        let gxr = &mut gx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (t, wv) in gxr.iter_mut().zip(&wd[o * din..(o + 1) * din]) {
                                *t += gv * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(adj, *w) {
                    for r in 0..n {
                        let xr = &xd[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (t, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *t += gv * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(adj, *b) {
                        for r in 0..n {
                            for o in 0..dout {
                                gb[o] += g[r * dout + o];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(t, gv)| *t += gv);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(t, gv)| *t += gv);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(t, gv)| *t += gv);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(t, gv)| *t -= gv);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    let bd = self.value(*b).data();
                    for ((t, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *t += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    let ad = self.value(*a).data();
                    for ((t, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *t += gv * av;
                    }
                }
            }
            Op::ScaleShift { x, scale } => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(t, gv)| *t += scale * gv);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    for ((t, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *t += gv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    for ((t, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *t += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    for ((t, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *t += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softmax(x) => {
                let t = &node.value;
                let (rows, cols) = if t.rank() == 1 { (1, t.len()) } else { t.dims2() };
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                if let Some(gx) = self.slot(adj, *x) {
                    let n_seg = segments.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg];
                    for ((gv, yv), &s) in g.iter().zip(y).zip(segments) {
                        dot[s] += gv * yv;
                    }
                    for (i, &s) in segments.iter().enumerate() {
                        gx[i] += y[i] * (g[i] - dot[s]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().for_each(|t| *t += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    let share = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|t| *t += share);
                }
            }
            Op::SegmentSum { x, segments } => {
                let cols = self.value(*x).dims2().1;
                if let Some(gx) = self.slot(adj, *x) {
                    for (r, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            gx[r * cols + c] += g[s * cols + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let cols = self.value(*x).dims2().1;
                if let Some(gx) = self.slot(adj, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..cols {
                            gx[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                if node.value.rank() == 1 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(gp) = self.slot(adj, p) {
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(t, gv)| *t += gv);
                        }
                        off += len;
                    }
                } else {
                    let (rows, total) = node.value.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).dims2().1;
                        if let Some(gp) = self.slot(adj, p) {
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + cols];
                                gp[r * cols..(r + 1) * cols]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(t, gv)| *t += gv);
                            }
                        }
                        off += cols;
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (rows, cols) = self.value(*x).dims2();
                let (xd, sd) = (self.value(*x).data(), self.value(*s).data());
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += sd[r] * g[r * cols + c];
                        }
                    }
                }
                if let Some(gs) = self.slot(adj, *s) {
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += g[r * cols + c] * xd[r * cols + c];
                        }
                        gs[r] += acc;
                    }
                }
            }
            Op::SqNorm(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    let xd = self.value(*x).data();
                    for (t, xv) in gx.iter_mut().zip(xd) {
                        *t += 2.0 * xv * g[0];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(t, gv)| *t += gv);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
