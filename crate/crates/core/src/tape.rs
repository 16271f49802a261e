//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every value is a dense `f64` matrix. Leaves are either tracked
//! (gradients are accumulated for them) or constants. A node requires a
//! gradient only if one of its inputs does, so untracked sub-graphs are
//! skipped during the backward sweep and their gradients are exactly zero.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + 1 * row`, `row` is `1 x k`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    GatherRows(Var, Arc<[usize]>),
    ConcatCols(Var, Var),
    /// `out[dst[e]] += scale[e] * msgs[src[e]]`.
    Scatter {
        msgs: Var,
        scale: Option<Var>,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    },
    SegmentMean {
        x: Var,
        seg: Arc<[usize]>,
        counts: Vec<f64>,
    },
    /// Weighted mean of per-row cross-entropies; keeps the softmax for backward.
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        weights: Vec<f64>,
        probs: Mat,
    },
    CosineRows(Var, Var),
    Mean(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Mat, track: bool) -> Var {
        self.push(value, Op::Leaf, track)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x k row");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((idx.len(), src.ncols()));
        for (mut row, &i) in v.rows_mut().into_iter().zip(idx.iter()) {
            row.assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    /// Sum-aggregates edge messages onto destination rows of an `n_out`-row
    /// matrix, each message multiplied by its `E x 1` scale when given.
    pub fn scatter(
        &mut self,
        msgs: Var,
        scale: Option<Var>,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
        n_out: usize,
    ) -> Var {
        assert_eq!(src.len(), dst.len());
        let m = self.value(msgs);
        let k = m.ncols();
        let mut out = Mat::zeros((n_out, k));
        {
            let ms = m.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            let sc = scale.map(|s| {
                let sv = self.value(s);
                assert_eq!(sv.dim(), (src.len(), 1), "edge scale must be E x 1");
                sv.as_slice().expect("standard layout")
            });
            for e in 0..src.len() {
                let w = sc.map_or(1.0, |s| s[e]);
                if w == 0.0 {
                    continue;
                }
                let (s, d) = (src[e] * k, dst[e] * k);
                for j in 0..k {
                    os[d + j] += w * ms[s + j];
                }
            }
        }
        let rg = self.rg(msgs) || scale.is_some_and(|s| self.rg(s));
        self.push(
            out,
            Op::Scatter {
                msgs,
                scale,
                src,
                dst,
            },
            rg,
        )
    }

    /// Mean of rows per segment id; empty segments produce zero rows.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<[usize]>, n_seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), seg.len());
        let mut counts = vec![0.0; n_seg];
        let mut out = Mat::zeros((n_seg, xv.ncols()));
        for (row, &s) in xv.rows().into_iter().zip(seg.iter()) {
            counts[s] += 1.0;
            let mut o = out.row_mut(s);
            o += &row;
        }
        for (mut o, &c) in out.rows_mut().into_iter().zip(&counts) {
            if c > 0.0 {
                o /= c;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMean { x, seg, counts }, rg)
    }

    /// `(1/n) * sum_i weights[i] * -log softmax(logits_i)[labels[i]]` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let n = lv.nrows();
        assert_eq!(labels.len(), n);
        assert_eq!(weights.len(), n);
        let mut probs = Mat::zeros(lv.dim());
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (p, &x) in probs.row_mut(i).iter_mut().zip(row.iter()) {
                *p = (x - max).exp();
                z += *p;
            }
            probs.row_mut(i).mapv_inplace(|p| p / z);
            let ce = -(row[labels[i]] - max - z.ln());
            total += weights[i] * ce;
        }
        let value = Mat::from_elem((1, 1), total / n.max(1) as f64);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            },
            rg,
        )
    }

    /// Row-wise cosine similarity, `n x 1`. A zero row has similarity 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "cosine_rows shape mismatch");
        let mut out = Mat::zeros((av.nrows(), 1));
        for i in 0..av.nrows() {
            out[[i, 0]] = cosine(av.row(i).as_slice().unwrap(), bv.row(i).as_slice().unwrap());
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::CosineRows(a, b), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Mat::from_elem((1, 1), av.sum() / av.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Back-propagates from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.clone());
                }
                if self.rg(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if self.rg(*a) {
                    acc(*a, g.clone());
                }
                if self.rg(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= sign(x));
                acc(*a, d);
            }
            Op::GatherRows(a, ix) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.dim());
                for (row, &i) in g.rows().into_iter().zip(ix.iter()) {
                    let mut t = d.row_mut(i);
                    t += &row;
                }
                acc(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let ka = self.value(*a).ncols();
                if self.rg(*a) {
                    acc(*a, g.slice(ndarray::s![.., ..ka]).to_owned());
                }
                if self.rg(*b) {
                    acc(*b, g.slice(ndarray::s![.., ka..]).to_owned());
                }
            }
            Op::Scatter {
                msgs,
                scale,
                src,
                dst,
            } => {
                let mv = self.value(*msgs);
                let k = mv.ncols();
                let gs = g.as_slice().expect("standard layout");
                let ms = mv.as_slice().expect("standard layout");
                let sv = scale.map(|s| self.value(s).as_slice().expect("standard layout"));
                if self.rg(*msgs) {
                    let mut d = Mat::zeros(mv.dim());
                    let ds = d.as_slice_mut().unwrap();
                    for e in 0..src.len() {
                        let w = sv.map_or(1.0, |s| s[e]);
                        if w == 0.0 {
                            continue;
                        }
                        let (s, t) = (src[e] * k, dst[e] * k);
                        for j in 0..k {
                            ds[s + j] += w * gs[t + j];
                        }
                    }
                    acc(*msgs, d);
                }
                if let Some(s) = scale {
                    if self.rg(*s) {
                        let mut d = Mat::zeros((src.len(), 1));
                        for e in 0..src.len() {
                            let (a, t) = (src[e] * k, dst[e] * k);
                            let mut dot = 0.0;
                            for j in 0..k {
                                dot += gs[t + j] * ms[a + j];
                            }
                            d[[e, 0]] = dot;
                        }
                        acc(*s, d);
                    }
                }
            }
            Op::SegmentMean { x, seg, counts } => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.dim());
                for (i, &s) in seg.iter().enumerate() {
                    let c = counts[s];
                    let mut r = d.row_mut(i);
                    r.assign(&g.row(s));
                    r /= c;
                }
                acc(*x, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let n = probs.nrows().max(1) as f64;
                let go = g[[0, 0]];
                let mut d = probs.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row[labels[i]] -= 1.0;
                    row *= go * weights[i] / n;
                }
                acc(*logits, d);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(av.dim());
                let mut db = Mat::zeros(bv.dim());
                for i in 0..av.nrows() {
                    let (x, y) = (av.row(i), bv.row(i));
                    let nx = x.dot(&x).sqrt();
                    let ny = y.dot(&y).sqrt();
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let c = node.value[[i, 0]];
                    let gi = g[[i, 0]];
                    let inv = 1.0 / (nx * ny);
                    for j in 0..x.len() {
                        da[[i, j]] = gi * (y[j] * inv - c * x[j] / (nx * nx));
                        db[[i, j]] = gi * (x[j] * inv - c * y[j] / (ny * ny));
                    }
                }
                if self.rg(*a) {
                    acc(*a, da);
                }
                if self.rg(*b) {
                    acc(*b, db);
                }
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let go = g[[0, 0]] / av.len().max(1) as f64;
                acc(*a, Mat::from_elem(av.dim(), go));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a tracked leaf, `None` if it received no contribution.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Mat::zeros(shape))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cosine similarity of two slices; 0 when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}
