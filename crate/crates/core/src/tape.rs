//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node whose inputs were recorded earlier, so node
//! order is a topological order and backward is a single reverse sweep.
//! Shape misuse inside the graph is a programming error and panics; callers
//! validate external data before it enters a tape.

use std::collections::HashMap;

use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const BCE_CLAMP: f64 = 1e-7;
const ENTROPY_CLAMP: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    MeanCols(Var),
    Rows { x: Var, start: usize },
    Cols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    AvgPool2(Var),
    Patchify { x: Var, c: usize, h: usize, w: usize, p: usize },
    Bce { p: Var, y: T },
    Entropy(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by parameter.
pub struct Gradients<T> {
    pub params: Vec<(ParamId, Tensor<T>)>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a non-parameter leaf that was marked with [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls within one tape share a node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.rows_cols();
        let (k2, n) = tb.rows_cols();
        assert_eq!(k, k2, "matmul of {:?} by {:?}", ta.shape(), tb.shape());
        let mut out = vec![T::zero(); m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([m, n], out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` stored as `[out × in]` this is a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.rows_cols();
        let (n, k2) = tb.rows_cols();
        assert_eq!(k, k2, "matmul_nt of {:?} by {:?}ᵀ", ta.shape(), tb.shape());
        let mut out = vec![T::zero(); m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([m, n], out).unwrap(), Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add of {:?} and {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, n) = tx.rows_cols();
        assert_eq!(tb.len(), n, "add_row of {:?} and {:?}", tx.shape(), tb.shape());
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// `x[m×n] + b[m]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = tx.rows_cols();
        assert_eq!(tb.len(), m, "add_col of {:?} and {:?}", tx.shape(), tb.shape());
        let mut out = tx.clone();
        for (row, &bv) in out.data_mut().chunks_mut(n).zip(tb.data()) {
            for o in row {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddCol(x, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "mul of {:?} and {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `x[m×n] ⊙ s[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let (_, n) = tx.rows_cols();
        assert_eq!(ts.len(), n, "mul_row of {:?} and {:?}", tx.shape(), ts.shape());
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &sv) in row.iter_mut().zip(ts.data()) {
                *o *= sv;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulRow(x, s), rg)
    }

    /// `x[m×n] ⊙ s[m]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let (m, n) = tx.rows_cols();
        assert_eq!(ts.len(), m, "mul_col of {:?} and {:?}", tx.shape(), ts.shape());
        let mut out = tx.clone();
        for (row, &sv) in out.data_mut().chunks_mut(n).zip(ts.data()) {
            for o in row {
                *o *= sv;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulCol(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalization along the last axis with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.rows_cols();
        let eps = T::c(eps);
        let inv_n = T::c(1.0 / n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            let constant = row.iter().all(|&v| v == row[0]);
            if !constant {
                for (o, &v) in xhat[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o = (v - mean) * r;
                }
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let tg = self.value(g);
            assert_eq!(tg.len(), n, "layer_norm gain {:?} for width {n}", tg.shape());
            for row in out.chunks_mut(n) {
                for (o, &gv) in row.iter_mut().zip(tg.data()) {
                    *o *= gv;
                }
            }
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            assert_eq!(tb.len(), n, "layer_norm bias {:?} for width {n}", tb.shape());
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(Tensor::new(shape, out).unwrap(), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean over the last axis: `[m×n] → [m]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.rows_cols();
        let inv = T::c(1.0 / n as f64);
        let data = tx
            .data()
            .chunks(n)
            .map(|r| {
                let mut s = T::zero();
                for &v in r {
                    s += v;
                }
                s * inv
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new([m], data).unwrap(), Op::MeanCols(x), rg)
    }

    /// Rows `start..start+len` of a rank-2 view.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.rows_cols();
        assert!(start + len <= m, "rows {start}..{} of {:?}", start + len, tx.shape());
        let data = tx.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new([len, n], data).unwrap(), Op::Rows { x, start }, rg)
    }

    /// Columns `start..start+len` of a rank-2 view.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.rows_cols();
        assert!(start + len <= n, "cols {start}..{} of {:?}", start + len, tx.shape());
        let mut data = Vec::with_capacity(m * len);
        for r in tx.data().chunks(n) {
            data.extend_from_slice(&r[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([m, len], data).unwrap(), Op::Cols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let n = self.value(xs[0]).rows_cols().1;
        let mut data = Vec::new();
        let mut m = 0;
        for &x in xs {
            let t = self.value(x);
            let (r, c) = t.rows_cols();
            assert_eq!(c, n, "concat_rows width mismatch: {:?}", t.shape());
            data.extend_from_slice(t.data());
            m += r;
        }
        let rg = self.rg(xs);
        self.push(Tensor::new([m, n], data).unwrap(), Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let m = self.value(xs[0]).rows_cols().0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (r, c) = self.value(x).rows_cols();
                assert_eq!(r, m, "concat_cols height mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(xs);
        self.push(Tensor::new([m, n], data).unwrap(), Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape.to_vec()).expect("reshape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Cross-correlation of `x[C_in×H×W]` with `k[C_out×C_in×kh×kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (tx, tk) = (self.value(x), self.value(k));
        let (xs, ks) = (tx.shape(), tk.shape());
        assert!(xs.len() == 3 && ks.len() == 4 && xs[0] == ks[1], "conv2d of {xs:?} with {ks:?}");
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w, cout, kh, kw, stride, pad, ho, wo };
        let cols = im2col(tx.data(), &geom);
        let kk = cin * kh * kw;
        let mut out = vec![T::zero(); cout * ho * wo];
        gemm_nn(tk.data(), &cols, &mut out, cout, kk, ho * wo);
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.len(), cout);
            for (row, &bv) in out.chunks_mut(ho * wo).zip(tb.data()) {
                for o in row {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x, k];
        deps.extend(b);
        let rg = self.rg(&deps);
        let keep = if self.nodes[k.0].requires_grad { cols } else { Vec::new() };
        self.push(Tensor::new([cout, ho, wo], out).unwrap(), Op::Conv2d { x, k, b, geom, cols: keep }, rg)
    }

    /// 2×2 average pooling with stride 2 on `[C×H×W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert!(s.len() == 3 && s[1] % 2 == 0 && s[2] % 2 == 0, "avg_pool2 of {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let q = T::c(0.25);
        let d = tx.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[ch * ho * wo + y * wo + xx] = (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]) * q;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([c, ho, wo], out).unwrap(), Op::AvgPool2(x), rg)
    }

    /// `[C×H×W] → [L × C·p·p]`: non-overlapping patches in raster order,
    /// each flattened channel-major.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert!(s.len() == 3 && s[1] % p == 0 && s[2] % p == 0, "patchify {s:?} by {p}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = patchify_data(tx.data(), c, h, w, p);
        let l = (h / p) * (w / p);
        let rg = self.rg(&[x]);
        self.push(Tensor::new([l, c * p * p], out).unwrap(), Op::Patchify { x, c, h, w, p }, rg)
    }

    /// Binary cross-entropy of a probability `p` (`[1]`) against label `y`,
    /// with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, y: f64) -> Var {
        let pv = self.value(p).data()[0].f64();
        let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let l = -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln();
        let rg = self.rg(&[p]);
        self.push(Tensor::scalar(T::c(l)), Op::Bce { p, y: T::c(y) }, rg)
    }

    /// Shannon entropy `-Σ pᵢ ln pᵢ` with the logarithm clamped at `1e-12`.
    pub fn entropy(&mut self, p: Var) -> Var {
        let floor = T::c(ENTROPY_CLAMP);
        let mut h = T::zero();
        for &v in self.value(p).data() {
            h -= v * v.max(floor).ln();
        }
        let rg = self.rg(&[p]);
        self.push(Tensor::scalar(h), Op::Entropy(p), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).len(), 1, "backward from non-scalar {:?}", self.value(out).shape());
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g).unwrap());
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let mut params: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (&id, &v) in &self.params {
            if let Some(g) = leaves.remove(&v.0) {
                params.push((id, g));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { params, leaves }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.rows_cols();
                let n = tb.rows_cols().1;
                if let Some(da) = self.acc(grads, *a) {
                    gemm_nt(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm_tn(ta.data(), g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.rows_cols();
                let n = tb.rows_cols().0;
                if let Some(da) = self.acc(grads, *a) {
                    gemm_nn(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm_tn(g, ta.data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        axpy(d, g);
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        axpy(db, row);
                    }
                }
            }
            Op::AddCol(x, b) => {
                let n = self.value(*x).rows_cols().1;
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                        for &v in row {
                            *d += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(tb) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ta) {
                        *d += gv * av;
                    }
                }
            }
            Op::MulRow(x, s) => {
                let (tx, ts) = (self.value(*x).data(), self.value(*s).data());
                let n = ts.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, &gv), &sv) in drow.iter_mut().zip(grow).zip(ts) {
                            *d += gv * sv;
                        }
                    }
                }
                if let Some(ds) = self.acc(grads, *s) {
                    for (grow, xrow) in g.chunks(n).zip(tx.chunks(n)) {
                        for ((d, &gv), &xv) in ds.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            Op::MulCol(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s).data());
                let n = tx.rows_cols().1;
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), &sv) in dx.chunks_mut(n).zip(g.chunks(n)).zip(ts) {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv * sv;
                        }
                    }
                }
                if let Some(ds) = self.acc(grads, *s) {
                    for ((d, grow), xrow) in ds.iter_mut().zip(g.chunks(n)).zip(tx.data().chunks(n)) {
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.rows_cols().1;
                if let Some(dx) = self.acc(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let mut dot = T::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = node.value.rows_cols().1;
                let inv_n = T::c(1.0 / n as f64);
                if let Some(b) = bias {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks(n) {
                            axpy(db, row);
                        }
                    }
                }
                if let Some(gn) = gain {
                    if let Some(dg) = self.acc(grads, *gn) {
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((d, &gv), &hv) in dg.iter_mut().zip(grow).zip(hrow) {
                                *d += gv * hv;
                            }
                        }
                    }
                }
                let gvals = gain.map(|gn| self.value(gn).data().to_vec());
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dh = vec![T::zero(); n];
                    for (r, ((drow, grow), hrow)) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dh[j] = match &gvals {
                                Some(gv) => grow[j] * gv[j],
                                None => grow[j],
                            };
                            s1 += dh[j];
                            s2 += dh[j] * hrow[j];
                        }
                        s1 = s1 * inv_n;
                        s2 = s2 * inv_n;
                        for j in 0..n {
                            drow[j] += rstd[r] * (dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(tx) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanCols(x) => {
                let n = self.value(*x).rows_cols().1;
                let inv = T::c(1.0 / n as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for (drow, &gv) in dx.chunks_mut(n).zip(g) {
                        for d in drow {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Rows { x, start } => {
                let n = node.value.rows_cols().1;
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(&mut dx[start * n..start * n + g.len()], g);
                }
            }
            Op::Cols { x, start } => {
                let len = node.value.rows_cols().1;
                let n = self.value(*x).rows_cols().1;
                if let Some(dx) = self.acc(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                        axpy(&mut drow[*start..start + len], grow);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if let Some(dx) = self.acc(grads, x) {
                        axpy(dx, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let n = node.value.rows_cols().1;
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).rows_cols().1;
                    if let Some(dx) = self.acc(grads, x) {
                        for (drow, grow) in dx.chunks_mut(w).zip(g.chunks(n)) {
                            axpy(drow, &grow[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(dx, g);
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let kk = geom.cin * geom.kh * geom.kw;
                let hw = geom.ho * geom.wo;
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for (d, row) in db.iter_mut().zip(g.chunks(hw)) {
                            for &v in row {
                                *d += v;
                            }
                        }
                    }
                }
                if let Some(dk) = self.acc(grads, *k) {
                    gemm_nt(g, cols, dk, geom.cout, hw, kk);
                }
                let tk = self.value(*k).data().to_vec();
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    gemm_tn(&tk, g, &mut dcols, geom.cout, kk, hw);
                    col2im(&dcols, geom, dx);
                }
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                let q = T::c(0.25);
                if let Some(dx) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = g[ch * ho * wo + y * wo + xx] * q;
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                dx[base] += gv;
                                dx[base + 1] += gv;
                                dx[base + w] += gv;
                                dx[base + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::Patchify { x, c, h, w, p } => {
                if let Some(dx) = self.acc(grads, *x) {
                    unpatchify_add(g, dx, *c, *h, *w, *p);
                }
            }
            Op::Bce { p, y } => {
                let pv = self.value(*p).data()[0].f64();
                let y = y.f64();
                if let Some(dp) = self.acc(grads, *p) {
                    if pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                        dp[0] += g[0] * T::c(-y / pv + (1.0 - y) / (1.0 - pv));
                    }
                }
            }
            Op::Entropy(p) => {
                let floor = T::c(ENTROPY_CLAMP);
                let tp = self.value(*p).data();
                if let Some(dp) = self.acc(grads, *p) {
                    for (d, &pv) in dp.iter_mut().zip(tp) {
                        let dh = if pv > floor { -(pv.ln() + T::one()) } else { -floor.ln() };
                        *d += g[0] * dh;
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, n) = x.rows_cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let mut mx = T::neg_infinity();
        for &v in row.iter() {
            mx = mx.max(v);
        }
        for v in row.iter_mut() {
            *v -= mx;
        }
        T::exp_in_place(row);
        let mut s = T::zero();
        for &v in row.iter() {
            s += v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh u) = σ(2u), which needs a single exponential.
#[inline]
fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    x * sigmoid(u + u)
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    let s = sigmoid(u + u);
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * (du + du)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * hw];
    for c in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.wo + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn patchify_data<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + py * p + y) * w + px * p;
                    out.extend_from_slice(&x[row..row + p]);
                }
            }
        }
    }
    out
}

fn unpatchify_add<T: Real>(g: &[T], dx: &mut [T], c: usize, h: usize, w: usize, p: usize) {
    let (gh, gw) = (h / p, w / p);
    let mut i = 0;
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + py * p + y) * w + px * p;
                    axpy(&mut dx[row..row + p], &g[i..i + p]);
                    i += p;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, probe, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
    }

    /// Checks `op` over ten random points; `shapes` are the inputs' shapes.
    fn check(shapes: &[&[usize]], op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        for seed in 0..10u64 {
            let report = check_op(shapes, seed, &op).unwrap();
            assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn grad_matmul() {
        check(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
        check(&[&[3, 4], &[2, 4]], |t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn grad_matmul_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.insert("a", randn(&mut rng, &[3, 4]), true).unwrap();
        let b = store.insert("b", randn(&mut rng, &[4, 2]), true).unwrap();
        let r = GradCheck::default()
            .run(&mut store, |t, s| {
                let (va, vb) = (t.param(s, a), t.param(s, b));
                let y = t.matmul(va, vb);
                Ok(probe(t, y, 1))
            })
            .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_elementwise() {
        check(&[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
        check(&[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]));
        check(&[&[3, 4], &[4]], |t, v| t.mul_row(v[0], v[1]));
        check(&[&[3, 4], &[3]], |t, v| t.add_col(v[0], v[1]));
        check(&[&[3, 4], &[3]], |t, v| t.mul_col(v[0], v[1]));
        check(&[&[3, 4]], |t, v| t.scale(v[0], -1.7));
        check(&[&[5, 3]], |t, v| t.gelu(v[0]));
        check(&[&[5, 3]], |t, v| t.sigmoid(v[0]));
    }

    #[test]
    fn grad_reductions_and_views() {
        check(&[&[3, 4]], |t, v| t.sum(v[0]));
        check(&[&[3, 4]], |t, v| t.mean_cols(v[0]));
        check(&[&[5, 4]], |t, v| t.rows(v[0], 1, 3));
        check(&[&[3, 6]], |t, v| t.cols(v[0], 2, 3));
        check(&[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
        check(&[&[2, 3], &[2, 1]], |t, v| t.concat_cols(&[v[1], v[0], v[1]]));
        check(&[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    }

    #[test]
    fn grad_softmax_and_norm() {
        check(&[&[3, 5]], |t, v| t.softmax(v[0]));
        check(&[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5));
        check(&[&[2, 6]], |t, v| t.layer_norm(v[0], None, None, 1e-5));
    }

    #[test]
    fn grad_image_ops() {
        check(&[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
        check(&[&[2, 6, 6], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, 2, 1));
        check(&[&[2, 4, 6]], |t, v| t.avg_pool2(v[0]));
        check(&[&[3, 4, 8]], |t, v| t.patchify(v[0], 2));
    }

    #[test]
    fn grad_losses() {
        check(&[&[1]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, 1.0)
        });
        check(&[&[1]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, 0.0)
        });
        check(&[&[1, 4]], |t, v| {
            let p = t.softmax(v[0]);
            t.entropy(p)
        });
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros([1, 4]));
        let y = t.softmax(x);
        assert!(t.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let x = t.constant(Tensor::from_rows(&[&[1000.0, 0.0]]));
        let y = t.softmax(x);
        let d = t.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6 && d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let x = t.input(randn(&mut rng, &[1, 5]));
        let y = t.softmax(x);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.wrt(x).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full([1, 7], 0.1));
        let bias = t.constant(Tensor::from_fn([7], |i| i as f64));
        let gain = t.constant(Tensor::ones([7]));
        let y = t.layer_norm(x, Some(gain), Some(bias), 1e-5);
        assert_eq!(t.value(y).data(), t.value(bias).data());
        let x = t.constant(Tensor::from_rows(&[&[1.0, -1.0]]));
        let y = t.layer_norm(x, None, None, 1e-12);
        assert!((t.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((t.value(y).data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn conv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let img = randn(&mut rng, &[2, 4, 5]);
        let x = t.constant(img.clone());
        let k = t.constant(Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.conv2d(x, k, None, 1, 0);
        assert!(t.value(y).bit_eq(&img));

        let x = t.constant(Tensor::full([1, 6, 6], 0.3));
        let k = t.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
        let y = t.conv2d(x, k, None, 1, 1);
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 6, 6]);
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((out.at(&[0, yy, xx]) - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = randn(&mut rng, &[2, 5, 6]);
        let ker = randn(&mut rng, &[3, 2, 3, 3]);
        let mut t = Tape::<f64>::new();
        let (x, k) = (t.constant(img.clone()), t.constant(ker.clone()));
        let y = t.conv2d(x, k, None, 2, 1);
        let out = t.value(y);
        assert_eq!(out.shape(), &[3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let iy = (oy * 2 + dy) as isize - 1;
                                let ix = (ox * 2 + dx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += ker.at(&[o, c, dy, dx]) * img.at(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((out.at(&[o, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::ones([2, 2]), false).unwrap();
        let b = store.insert("b", Tensor::ones([2, 2]), true).unwrap();
        let mut t = Tape::new();
        let (va, vb) = (t.param(&store, a), t.param(&store, b));
        let y = t.matmul(va, vb);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.param(a).is_none());
        assert_eq!(g.param(b).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut t = Tape::<f32>::new();
            let x = t.input(Tensor::from_fn([4, 8], |_| rng.sample::<f32, _>(StandardNormal)));
            let n = t.layer_norm(x, None, None, 1e-5);
            let s = t.softmax(n);
            let g = t.gelu(s);
            let z = t.matmul_nt(g, n);
            let o = t.sum(z);
            t.backward(o).wrt(x).unwrap().clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn bce_and_entropy_values() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::scalar(0.5));
        let l = t.bce(p, 1.0);
        assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let p = t.constant(Tensor::scalar(1.0));
        let l = t.bce(p, 1.0);
        assert!(t.value(l).data()[0] < 1e-6);
        let p = t.constant(Tensor::scalar(0.9));
        let l = t.bce(p, 0.0);
        assert!((t.value(l).data()[0] - std::f64::consts::LN_10).abs() < 1e-6);
        let p = t.constant(Tensor::full([4], 0.25));
        let h = t.entropy(p);
        assert!((t.value(h).data()[0] - 4f64.ln()).abs() < 1e-12);
        let p = t.constant(Tensor::new([3], vec![0.0, 1.0, 0.0]).unwrap());
        let h = t.entropy(p);
        assert_eq!(t.value(h).data()[0], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 12)) {
                let mut t = Tape::<f64>::new();
                let x = t.constant(Tensor::new([3, 4], v).unwrap());
                let y = t.softmax(x);
                for row in t.value(y).data().chunks(4) {
                    prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn layer_norm_of_constant_row_is_bias(c in -1e3f32..1e3, b in prop::collection::vec(-5.0f32..5.0, 9)) {
                let mut t = Tape::<f32>::new();
                let x = t.constant(Tensor::full([1, 9], c));
                let bias = t.constant(Tensor::new([9], b.clone()).unwrap());
                let gain = t.constant(Tensor::full([9], 3.0));
                let y = t.layer_norm(x, Some(gain), Some(bias), 1e-5);
                prop_assert_eq!(t.value(y).data(), &b[..]);
            }

            #[test]
            fn finite_inputs_give_finite_outputs(v in prop::collection::vec(-1e4f32..1e4, 16)) {
                let mut t = Tape::<f32>::new();
                let x = t.input(Tensor::new([4, 4], v).unwrap());
                let a = t.softmax(x);
                let b = t.layer_norm(x, None, None, 1e-5);
                let c = t.sigmoid(x);
                let d = t.gelu(b);
                let e = t.entropy(a);
                let p = t.rows(c, 0, 1);
                let p = t.cols(p, 0, 1);
                let p = t.reshape(p, &[1]);
                let f = t.bce(p, 1.0);
                for v in [a, b, c, d, e, f] {
                    prop_assert!(t.value(v).all_finite());
                }
                let s = t.add(e, f);
                let g = t.backward(s);
                prop_assert!(g.wrt(x).unwrap().all_finite());
            }
        }
    }
}
