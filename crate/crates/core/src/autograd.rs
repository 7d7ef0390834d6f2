//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Values are computed eagerly as operations are recorded; `backward` walks
//! the tape in reverse. Parameters are borrowed, never copied, so one tape
//! can reference weights owned by several model components.
//!
//! Sequences are packed: a batch of variable-length sequences is a single
//! matrix whose rows are the concatenated positions, and attention receives
//! the segment table that says which rows belong together.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows of one attention group: queries `q_start..q_start+q_len` attend to
/// keys/values `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Value<'p> {
    Owned(Mat),
    Borrowed(&'p Mat),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<Option<usize>>,
    },
    Concat(Vec<Var>),
    L2Rows {
        x: Var,
        inv_norm: Vec<f64>,
        normalized: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Mat>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
    MaskMul(Var, Mat),
    SumAll(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training tape: dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Returns the dropout generator so a caller can continue the stream.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.dropout_rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Registers a trainable tensor. Its gradient is available after
    /// `backward` through the returned var.
    pub fn param(&mut self, m: &'p Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed tensor that takes no gradient (frozen weights).
    pub fn frozen(&mut self, m: &'p Mat) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + bias` with a `1 x m` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let out = self.value(x) + self.value(bias);
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| gelu(v).0);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with affine `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &(&xhat * self.value(gamma)) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Builds a matrix whose row `r` is `table[rows[r]]`, or zero for `None`.
    /// Used for embedding lookup and for padding/aligning packed sequences.
    pub fn gather(&mut self, table: Var, rows: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((rows.len(), t.ncols()));
        for (r, src) in rows.iter().enumerate() {
            if let Some(i) = src {
                out.row_mut(r).assign(&t.row(*i));
            }
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, rows }, ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Divides each row by `max(||row||_2, L2_EPS)`.
    pub fn l2_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_norm = Vec::with_capacity(xv.nrows());
        let mut normalized = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (inv, is_norm) = if n > L2_EPS {
                (1.0 / n, true)
            } else {
                (1.0 / L2_EPS, false)
            };
            row.mapv_inplace(|v| v * inv);
            inv_norm.push(inv);
            normalized.push(is_norm);
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::L2Rows {
                x,
                inv_norm,
                normalized,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over packed segments. `q`,
    /// `k`, `v` are already projected; heads are contiguous column blocks.
    /// With `causal`, query `i` of a segment sees keys `0..=i + (k_len - q_len)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            let offset = seg.k_len as isize - seg.q_len as isize;
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let qs = qv.slice(s![seg.q_start..seg.q_start + seg.q_len, cols.clone()]);
                let ks = kv.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let vs = vv.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let limit = if causal {
                        (i as isize + offset).clamp(-1, seg.k_len as isize - 1)
                    } else {
                        seg.k_len as isize - 1
                    };
                    softmax_prefix(&mut row, scale, limit);
                }
                out.slice_mut(s![seg.q_start..seg.q_start + seg.q_len, cols])
                    .assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            ng,
        )
    }

    /// Attention weights recorded by an attention node, one matrix per
    /// (segment, head) in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with a `None` target contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        for ((r, mut row), t) in probs.rows_mut().into_iter().enumerate().zip(&targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            if let Some(t) = *t {
                total -= lv[[r, t]] - max - z.ln();
            }
        }
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let shape = self.nodes[x.0].value_dim();
        let keep = 1.0 - p;
        let mask = Mat::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = self.value(x) * &mask;
        let ng = self.ng(x);
        self.push(out, Op::MaskMul(x, mask), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(x), ng)
    }

    /// Back-propagates from the `1 x 1` node `root` and returns the gradient
    /// table, indexed by var.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::Gelu(x) => {
                let mut d = self.value(*x).mapv(|v| gelu(v).1);
                d *= g;
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dhx = dh.dot(&xh);
                        Zip::from(dx.row_mut(r))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = inv / n * (n * a - sum_dh - b * sum_dhx));
                    }
                    acc(*x, dx);
                }
            }
            Op::Gather { table, rows } => {
                let t = self.value(*table);
                let mut d = Mat::zeros(t.raw_dim());
                for (r, src) in rows.iter().enumerate() {
                    if let Some(i) = src {
                        let mut dst = d.row_mut(*i);
                        dst += &g.row(r);
                    }
                }
                acc(*table, d);
            }
            Op::Concat(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::L2Rows {
                x,
                inv_norm,
                normalized,
            } => {
                let y = self.nodes[idx].value_ref();
                let mut dx = g.clone();
                for r in 0..dx.nrows() {
                    let inv = inv_norm[r];
                    if normalized[r] {
                        let proj = y.row(r).dot(&g.row(r));
                        Zip::from(dx.row_mut(r))
                            .and(&y.row(r))
                            .for_each(|o, &yy| *o = (*o - yy * proj) * inv);
                    } else {
                        dx.row_mut(r).mapv_inplace(|v| v * inv);
                    }
                }
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = Mat::zeros(qv.raw_dim());
                let mut dkm = Mat::zeros(kv.raw_dim());
                let mut dv = Mat::zeros(vv.raw_dim());
                for (si, seg) in segments.iter().enumerate() {
                    let qr = seg.q_start..seg.q_start + seg.q_len;
                    let kr = seg.k_start..seg.k_start + seg.k_len;
                    for h in 0..*heads {
                        let cols = h * dk..(h + 1) * dk;
                        let p = &probs[si * heads + h];
                        let go = g.slice(s![qr.clone(), cols.clone()]);
                        let qs = qv.slice(s![qr.clone(), cols.clone()]);
                        let ks = kv.slice(s![kr.clone(), cols.clone()]);
                        let vs = vv.slice(s![kr.clone(), cols.clone()]);
                        let mut dvs = dv.slice_mut(s![kr.clone(), cols.clone()]);
                        dvs += &p.t().dot(&go);
                        let dp = go.dot(&vs.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|o, &pp| {
                                *o -= pp * dot;
                                *o *= scale;
                            });
                        }
                        let mut dqs = dq.slice_mut(s![qr.clone(), cols.clone()]);
                        dqs += &ds.dot(&ks);
                        let mut dks = dkm.slice_mut(s![kr.clone(), cols.clone()]);
                        dks += &ds.t().dot(&qs);
                    }
                }
                acc(*q, dq);
                acc(*k, dkm);
                acc(*v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g[[0, 0]];
                let mut d = probs.clone();
                for (r, t) in targets.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    match t {
                        Some(t) => {
                            row[*t] -= 1.0;
                            row.mapv_inplace(|v| v * gs);
                        }
                        None => row.fill(0.0),
                    }
                }
                acc(*logits, d);
            }
            Op::MaskMul(x, mask) => acc(*x, g * mask),
            Op::SumAll(x) => {
                let shape = self.value(*x).raw_dim();
                acc(*x, Mat::from_elem(shape, g[[0, 0]]));
            }
        }
    }
}

impl Node<'_> {
    fn value_ref(&self) -> &Mat {
        match &self.value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    fn value_dim(&self) -> (usize, usize) {
        self.value_ref().dim()
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Softmax of `row * scale` over columns `0..=limit`; later columns get 0.
/// A row with `limit < 0` becomes all zeros.
fn softmax_prefix(row: &mut ndarray::ArrayViewMut1<f64>, scale: f64, limit: isize) {
    let n = row.len();
    let upto = (limit + 1).max(0) as usize;
    if upto == 0 {
        row.fill(0.0);
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for j in 0..upto {
        max = max.max(row[j] * scale);
    }
    let mut z = 0.0;
    for j in 0..upto {
        let e = (row[j] * scale - max).exp();
        row[j] = e;
        z += e;
    }
    for j in 0..upto {
        row[j] /= z;
    }
    for j in upto..n {
        row[j] = 0.0;
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Row-wise log-softmax, outside any tape.
pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lz = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lz);
    }
    out
}
