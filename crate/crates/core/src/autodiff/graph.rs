use std::collections::HashMap;

use super::kernels::{add_assign, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};
use super::tensor::{lit, ParamId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One contiguous sequence inside a packed batch of rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    ScaleMul { scale: Var, x: Var },
    Scale(Var, S),
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<S>, count: usize },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, end: usize },
    RepeatCols { x: Var, times: usize },
    ConcatRows(Vec<Var>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>, probs: Vec<Vec<S>> },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    needs_grad: bool,
    param: Option<ParamId>,
    op: Op<S>,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in execution order, so parents always precede children
/// and the reverse sweep in [`Graph::backward`] is a valid topological order.
/// The graph is consumed by `backward`.
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, needs_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    /// Copies a node out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("consistent node")
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_raw(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Input whose gradient is wanted but which is not a model parameter.
    pub fn variable(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Registers a model parameter. Repeated registration of the same tensor
    /// returns the same node, so shared weights accumulate every use.
    /// Frozen tensors enter as constants.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf);
        self.nodes[v.0].param = Some(t.id());
        self.params.insert(t.id(), v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMulNT(a, b)))
    }

    /// Elementwise sum. The smaller operand may omit leading dimensions of
    /// the larger one and is broadcast over them.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = if self.value(a).len() >= self.value(b).len() { (a, b) } else { (b, a) };
        let bs = self.shape(big);
        let ss = self.shape(small);
        if ss.len() > bs.len() || bs[bs.len() - ss.len()..] != *ss {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let sv = self.value(small);
        let n = sv.len();
        let out: Vec<S> = self
            .value(big)
            .iter()
            .enumerate()
            .map(|(i, x)| *x + sv[i % n])
            .collect();
        let shape = bs.to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, ng, Op::Add(big, small)))
    }

    /// Elementwise product of `x` with `scale`, where `scale` is a single
    /// value, has the shape of `x`, or has the shape of `x` with the last
    /// dimension set to 1 (one factor per row).
    pub fn scale_mul(&mut self, scale: Var, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(scale).to_vec();
        let sn = self.value(scale).len();
        let xn = self.value(x).len();
        let cols = *xs.last().unwrap_or(&1);
        let per_row = ss.len() == xs.len() && ss.last() == Some(&1) && ss[..ss.len() - 1] == xs[..xs.len() - 1];
        if !(sn == 1 || ss == xs || per_row) {
            return Err(Error::shape("scale_mul", &ss, &xs));
        }
        let sv = self.value(scale);
        let xv = self.value(x);
        let out: Vec<S> = (0..xn).map(|i| xv[i] * sv[broadcast_index(i, sn, xn, cols)]).collect();
        let ng = self.needs(scale) || self.needs(x);
        Ok(self.push(xs, out, ng, Op::ScaleMul { scale, x }))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::Scale(x, c))
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("softmax axis {axis} for shape {shape:?}")));
        }
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax received a non-finite input".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        let mut buf = vec![S::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    buf[j] = xv[(o * len + j) * inner + i];
                }
                softmax_in_place(&mut buf);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = buf[j];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(shape, out, ng, Op::Softmax { x, outer, axis: len, inner }))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[1]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let rows = self.value(x).len() / d;
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let dn = lit::<S>(d as f64);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(shape, out, ng, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| gelu_value(*v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::Gelu(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T×V]`. Rows whose target equals `ignore_index` do not count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != ignore_index && y >= v) {
            return Err(Error::Index(format!("target id {bad} with {v} classes")));
        }
        let lv = self.value(logits);
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("cross_entropy received non-finite logits".into()));
        }
        let mut probs = lv.to_vec();
        let mut total = S::zero();
        let mut count = 0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            softmax_in_place(row);
            if y != ignore_index {
                // log p computed from the logits to keep precision for tiny p
                let raw = &lv[r * v..(r + 1) * v];
                let max = raw.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = raw.iter().map(|x| (*x - max).exp()).sum::<S>().ln() + max;
                total = total + lse - raw[y];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy with every position ignored".into()));
        }
        let loss = total / lit(count as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            ng,
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore: ignore_index, probs, count },
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} with vocabulary of {vocab}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(vec![ids.len(), d], out, ng, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Index(format!("columns {start}..{end} of {c}")));
        }
        let xv = self.value(x);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![r, w], out, ng, Op::SliceCols { x, start, end }))
    }

    /// Repeats every column `times` times in place: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "repeat_cols")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c * times);
        for v in xv {
            out.extend(std::iter::repeat_n(*v, times));
        }
        let ng = self.needs(x);
        Ok(self.push(vec![r, c * times], out, ng, Op::RepeatCols { x, times }))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, cc) = self.dims2(p, "concat_rows")?;
            if cc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(vec![rows, c], out, ng, Op::ConcatRows(parts.to_vec())))
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "row_sum")?;
        let xv = self.value(x);
        let out = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().copied().sum()).collect();
        let ng = self.needs(x);
        Ok(self.push(vec![r, 1], out, ng, Op::RowSum(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.value(x).iter().copied().sum::<S>() / lit(n as f64);
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::Mean(x))
    }

    /// Multi-head causal self-attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; each segment is an independent
    /// sequence and tokens only attend to earlier-or-equal positions inside
    /// their own segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (rows, d) = self.dims2(q, "causal_attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::shape("causal_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != rows || segments.iter().any(|s| s.start + s.len > rows) {
            return Err(Error::Contract(format!("segments cover {covered} of {rows} rows")));
        }
        let dh = d / heads;
        let inv = S::one() / lit::<S>(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![S::zero(); rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![S::zero(); t * t];
                for i in 0..t {
                    let qi = &qv[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    let row = &mut p[i * t..i * t + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        *s = dot(qi, kj) * inv;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for (j, pj) in row.iter().enumerate() {
                        let vj = &vv[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for (ov, x) in o.iter_mut().zip(vj) {
                            *ov = *ov + *pj * *x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![rows, d],
            out,
            ng,
            Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs },
        ))
    }

    /// Attention weights saved by a `causal_attention` node, one
    /// `len×len` row-major matrix per (segment, head), segment-major.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<S>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(node, &gout, &mut grads);
        }
        let mut by_param = HashMap::new();
        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                let g = grads[idx].take().unwrap_or_else(|| vec![S::zero(); node.value.len()]);
                match node.param {
                    Some(id) => {
                        by_param.insert(id, g);
                    }
                    None => {
                        leaves.insert(Var(idx), g);
                    }
                }
            }
        }
        Ok(Gradients { by_param, leaves })
    }

    fn propagate(&self, node: &Node<S>, gout: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut send = |v: Var, g: Vec<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_assign(acc, &g),
                slot => *slot = Some(g),
            }
        };
        let zeros = |v: Var| vec![S::zero(); self.nodes[v.0].value.len()];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut ga = zeros(*a);
                    matmul_nt_acc(gout, self.value(*b), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = zeros(*b);
                    matmul_tn_acc(self.value(*a), gout, &mut gb, m, k, n);
                    send(*b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.needs(*a) {
                    let mut ga = zeros(*a);
                    matmul_acc(gout, self.value(*b), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = zeros(*b);
                    matmul_tn_acc(gout, self.value(*a), &mut gb, m, n, k);
                    send(*b, gb);
                }
            }
            Op::Add(big, small) => {
                if self.needs(*small) {
                    let mut gs = zeros(*small);
                    let n = gs.len();
                    for (i, g) in gout.iter().enumerate() {
                        gs[i % n] = gs[i % n] + *g;
                    }
                    send(*small, gs);
                }
                if self.needs(*big) {
                    send(*big, gout.to_vec());
                }
            }
            Op::ScaleMul { scale, x } => {
                let sv = self.value(*scale);
                let xv = self.value(*x);
                let (sn, xn) = (sv.len(), xv.len());
                let cols = *self.shape(*x).last().unwrap_or(&1);
                if self.needs(*x) {
                    let gx = (0..xn).map(|i| gout[i] * sv[broadcast_index(i, sn, xn, cols)]).collect();
                    send(*x, gx);
                }
                if self.needs(*scale) {
                    let mut gs = zeros(*scale);
                    for i in 0..xn {
                        let j = broadcast_index(i, sn, xn, cols);
                        gs[j] = gs[j] + gout[i] * xv[i];
                    }
                    send(*scale, gs);
                }
            }
            Op::Scale(x, c) => send(*x, gout.iter().map(|g| *g * *c).collect()),
            Op::Softmax { x, outer, axis, inner } => {
                let y = &node.value;
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * axis + j) * inner + i;
                        let s: S = (0..*axis).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..*axis {
                            gx[at(j)] = y[at(j)] * (gout[at(j)] - s);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain);
                let rows = rstd.len();
                let dn = lit::<S>(d as f64);
                if self.needs(*x) {
                    let mut gx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let dxhat: Vec<S> = (0..d).map(|j| gout[r * d + j] * gv[j]).collect();
                        let m1 = dxhat.iter().copied().sum::<S>() / dn;
                        let m2 = (0..d).map(|j| dxhat[j] * xhat[r * d + j]).sum::<S>() / dn;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    send(*x, gx);
                }
                if self.needs(*gain) {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                    send(*gain, gg);
                }
                if self.needs(*bias) {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        add_assign(&mut gb, &gout[r * d..(r + 1) * d]);
                    }
                    send(*bias, gb);
                }
            }
            Op::Gelu(x) => {
                let gx = self
                    .value(*x)
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| *g * gelu_slope(*v))
                    .collect();
                send(*x, gx);
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = gout[0] / lit::<S>(*count as f64);
                let mut gl = vec![S::zero(); probs.len()];
                for (r, &y) in targets.iter().enumerate() {
                    if y == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] = probs[r * v + j] * scale;
                    }
                    gl[r * v + y] = gl[r * v + y] - scale;
                }
                send(*logits, gl);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = zeros(*table);
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                }
                send(*table, gt);
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = end - start;
                let mut gx = zeros(*x);
                for i in 0..r {
                    gx[i * c + start..i * c + end].copy_from_slice(&gout[i * w..(i + 1) * w]);
                }
                send(*x, gx);
            }
            Op::RepeatCols { x, times } => {
                let gx = gout.chunks(*times).map(|ch| ch.iter().copied().sum()).collect();
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    send(*p, gout[at..at + n].to_vec());
                    at += n;
                }
            }
            Op::RowSum(x) => {
                let c = self.shape(*x)[1];
                let gx = gout.iter().flat_map(|g| std::iter::repeat_n(*g, c)).collect();
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![gout[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![gout[0] / lit(n as f64); n]);
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let d = self.shape(*q)[1];
                let dh = d / heads;
                let inv = S::one() / lit::<S>(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (mut gq, mut gk, mut gv) = (zeros(*q), zeros(*k), zeros(*v));
                let mut pi = 0;
                for seg in segments {
                    let t = seg.len;
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let off = h * dh;
                        let row = |r: usize| (seg.start + r) * d + off;
                        for i in 0..t {
                            let go = &gout[row(i)..row(i) + dh];
                            // dP_ij = go · v_j, then softmax backward on row i
                            let dp: Vec<S> = (0..=i).map(|j| dot(go, &vv[row(j)..row(j) + dh])).collect();
                            let pr = &p[i * t..i * t + i + 1];
                            let s: S = pr.iter().zip(&dp).map(|(a, b)| *a * *b).sum();
                            for j in 0..=i {
                                let pij = pr[j];
                                for c in 0..dh {
                                    gv[row(j) + c] = gv[row(j) + c] + pij * go[c];
                                }
                                let ds = pij * (dp[j] - s) * inv;
                                for c in 0..dh {
                                    gq[row(i) + c] = gq[row(i) + c] + ds * kv[row(j) + c];
                                    gk[row(j) + c] = gk[row(j) + c] + ds * qv[row(i) + c];
                                }
                            }
                        }
                    }
                }
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
        }
    }
}

fn broadcast_index(i: usize, sn: usize, xn: usize, cols: usize) -> usize {
    if sn == 1 {
        0
    } else if sn == xn {
        i
    } else {
        i / cols
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_value<S: Scalar>(x: S) -> S {
    let inner = lit::<S>(GELU_C) * (x + lit::<S>(GELU_K) * x * x * x);
    lit::<S>(0.5) * x * (S::one() + inner.tanh())
}

fn gelu_slope<S: Scalar>(x: S) -> S {
    let inner = lit::<S>(GELU_C) * (x + lit::<S>(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = lit::<S>(GELU_C) * (S::one() + lit::<S>(3.0 * GELU_K) * x * x);
    lit::<S>(0.5) * (S::one() + t) + lit::<S>(0.5) * x * (S::one() - t * t) * dinner
}

/// Result of a backward sweep.
pub struct Gradients<S> {
    by_param: HashMap<ParamId, Vec<S>>,
    leaves: HashMap<Var, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a non-parameter leaf created with [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn of_param(&self, id: ParamId) -> Option<&[S]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    /// Adds this pass's gradient into `t`'s buffer, if `t` took part.
    pub fn accumulate_into(&self, t: &mut Tensor<S>) -> Result<()> {
        match self.by_param.get(&t.id()) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.by_param.len()
    }
}
