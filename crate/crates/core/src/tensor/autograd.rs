use super::kernels::{self, ConvGeom, Layout};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Bmm(Var, Var),
    Transpose(Var),
    Broadcast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddBias(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, Real, Real),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    IndexRows(Var, Vec<usize>),
    NormalizeRows(Var, Real),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AddChannelBias(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Every op validates shapes, computes its output eagerly and appends a node;
/// [`Tape::backward`] replays the nodes in reverse. A tape is built fresh for
/// each forward pass and is not shared between threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` is not a tracked leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.leaves.get(v.0)?.as_ref().map(|t| t.data())
    }

    /// Gradient for a leaf as a tensor; unreachable leaves yield zeros of `shape`.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.leaves.get(v.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
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

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: t.requires_grad() });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<Real>, op: Op, needs_grad: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(name, shape, data, op, ng)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(1.0, self.data(a), Layout::row_major(m, k), self.data(b), Layout::row_major(k, n), 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", format!("{sa:?} · {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            kernels::gemm(
                1.0,
                &da[i * m * k..(i + 1) * m * k],
                Layout::row_major(m, k),
                &db[i * k * n..(i + 1) * k * n],
                Layout::row_major(k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push("bmm", vec![bs, m, n], out, Op::Bmm(a, b), ng)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 3 {
            return shape_err("transpose", format!("rank {} unsupported", s.len()));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.len().checked_sub(2).map_or(1, |k| s[..k].iter().product());
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let (src, dst) = (&src[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let ng = self.ng(x);
        self.push("transpose", shape, out, Op::Transpose(x), ng)
    }

    /// Repeats `x` along a new leading axis of length `batch`.
    pub fn broadcast(&mut self, x: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return shape_err("broadcast", "batch must be positive");
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let ng = self.ng(x);
        self.push("broadcast", shape, out, Op::Broadcast(x), ng)
    }

    /// `x[..., k] · w[k×n] (+ b[n])`, applied to every leading index.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if s.is_empty() || sw.len() != 2 || s[s.len() - 1] != sw[0] {
            return shape_err("linear", format!("{s:?} · {sw:?}"));
        }
        let rows = s[..s.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push("add", self.shape(a).to_vec(), data, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", self.shape(a).to_vec(), data, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", self.shape(a).to_vec(), data, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Scale(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Adds `b[n]` to every length-`n` row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(b) != [n] {
            return shape_err("add_bias", format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)));
        }
        let bias = self.data(b);
        let data = self.data(x).chunks(n).flat_map(|row| row.iter().zip(bias).map(|(v, b)| v + b)).collect();
        let ng = self.ng(x) || self.ng(b);
        self.push("add_bias", self.shape(x).to_vec(), data, Op::AddBias(x, b), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        self.unary("log", x, Real::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Real::exp, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: Real, hi: Real) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let m = d.iter().sum::<Real>() / d.len() as Real;
        let ng = self.ng(x);
        self.push("mean", Vec::new(), vec![m], Op::Mean(x), ng)
    }

    /// Sums over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return shape_err("sum_last", "scalar input");
        }
        let n = s[s.len() - 1];
        let data = self.data(x).chunks(n).map(|r| r.iter().sum()).collect();
        let ng = self.ng(x);
        self.push("sum_last", s[..s.len() - 1].to_vec(), data, Op::SumLast(x), ng)
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = last_dim(&s);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(x);
        self.push("softmax", s, out, Op::Softmax(x), ng)
    }

    /// Row-wise log-softmax of `x[m×n]` whose normalizer runs only over
    /// entries with `include[r*n + c] == true`. Excluded entries output 0 and
    /// receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, include: Vec<bool>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || include.len() != s[0] * s[1] {
            return shape_err("masked_log_softmax", format!("input {s:?}, mask of {}", include.len()));
        }
        let n = s[1];
        let mut out = vec![0.0; s[0] * n];
        for (r, row) in self.data(x).chunks(n).enumerate() {
            let mask = &include[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(Real::NEG_INFINITY, Real::max);
            if max == Real::NEG_INFINITY {
                continue;
            }
            let lse = max + row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| (v - max).exp()).sum::<Real>().ln();
            for c in 0..n {
                if mask[c] {
                    out[r * n + c] = row[c] - lse;
                }
            }
        }
        let ng = self.ng(x);
        self.push("masked_log_softmax", s, out, Op::MaskedLogSoftmax(x, include), ng)
    }

    /// Scales each last-axis row to unit length: `x / (‖x‖ + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: Real) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = last_dim(&s);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            for v in row.iter_mut() {
                *v /= norm + eps;
            }
        }
        let ng = self.ng(x);
        self.push("normalize_rows", s, out, Op::NormalizeRows(x, eps), ng)
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        let ng = self.ng(x);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), ng)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(k, &d)| k != axis && d != first[k]) {
                return shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &v in xs {
            let d = self.shape(v)[axis];
            let src = self.data(v);
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + d * inner].copy_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
            offset += d;
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push("concat", shape, out, Op::Concat(xs.to_vec(), axis), ng)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return shape_err("narrow", format!("{start}+{len} on axis {axis} of {s:?}"));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * d + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push("narrow", shape, out, Op::Narrow { x, axis, start }, ng)
    }

    /// Gathers rows of `x[m×n]` in the given order (repeats allowed).
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return shape_err("index_rows", format!("rows {rows:?} of {s:?}"));
        }
        let n = s[1];
        let src = self.data(x);
        let out = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        let ng = self.ng(x);
        self.push("index_rows", vec![rows.len(), n], out, Op::IndexRows(x, rows.to_vec()), ng)
    }

    // ---- convolutional --------------------------------------------------

    /// Cross-correlation of `x[N×Cin×H×W]` with `w[Cout×Cin×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}"));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)
            .ok_or_else(|| Error::Shape { op: "conv2d", detail: format!("kernel {sw:?} stride {stride} pad {padding} does not fit {sx:?}") })?;
        let (n, cout) = (sx[0], sw[0]);
        let (k, p) = (geom.patch_len(), geom.out_len());
        let img = sx[1] * sx[2] * sx[3];
        let mut cols = vec![0.0; k * p];
        let mut out = vec![0.0; n * cout * p];
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..n {
            kernels::im2col(&geom, &xd[i * img..(i + 1) * img], &mut cols);
            kernels::gemm(1.0, wd, Layout::row_major(cout, k), &cols, Layout::row_major(k, p), 0.0, &mut out[i * cout * p..(i + 1) * cout * p]);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push("conv2d", vec![n, cout, geom.out_h, geom.out_w], out, Op::Conv2d { x, w, geom }, ng)
    }

    /// Adds `b[C]` to every spatial cell of channel `c` in `x[N×C×H×W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(b) != [s[1]] {
            return shape_err("add_channel_bias", format!("input {s:?}, bias {:?}", self.shape(b)));
        }
        let plane = s[2] * s[3];
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let c = idx % s[1];
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push("add_channel_bias", s, out, Op::AddChannelBias(x, b), ng)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("max_pool2d", format!("input {s:?}"));
        }
        let geom = ConvGeom::new(s[1], s[2], s[3], kernel, kernel, stride, 0)
            .ok_or_else(|| Error::Shape { op: "max_pool2d", detail: format!("window {kernel}/{stride} does not fit {s:?}") })?;
        let img = s[1] * s[2] * s[3];
        let per_out = s[1] * geom.out_len();
        let mut out = vec![0.0; s[0] * per_out];
        let mut argmax = vec![0usize; s[0] * per_out];
        let xd = self.data(x);
        for i in 0..s[0] {
            kernels::max_pool(&geom, &xd[i * img..(i + 1) * img], &mut out[i * per_out..(i + 1) * per_out], &mut argmax[i * per_out..(i + 1) * per_out]);
            argmax[i * per_out..(i + 1) * per_out].iter_mut().for_each(|a| *a += i * img);
        }
        let ng = self.ng(x);
        self.push("max_pool2d", vec![s[0], s[1], geom.out_h, geom.out_w], out, Op::MaxPool2d { x, argmax }, ng)
    }

    /// Hash of the branch taken by every piecewise op (ReLU sign, clamp
    /// saturation, max-pool winner). Equal hashes mean the same linear piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    k.hash(&mut h);
                    self.data(*x).iter().for_each(|v| (*v > 0.0).hash(&mut h));
                }
                Op::Clamp(x, lo, hi) => {
                    k.hash(&mut h);
                    self.data(*x).iter().for_each(|v| ((*v < *lo) as u8 + 2 * (*v > *hi) as u8).hash(&mut h));
                }
                Op::MaxPool2d { argmax, .. } => {
                    k.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            } else {
                self.backprop(node, &g, &mut grads);
            }
        }
        Ok(Gradients { leaves })
    }

    fn backprop(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let y = node.value.data();
        // Hands out the (zero-initialized) gradient buffer of `v` if it is tracked.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.ng(v) {
                    let len = self.value(v).numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = acc!(*a) {
                    kernels::gemm(1.0, g, Layout::row_major(m, n), self.data(*b), Layout::transposed(k, n), 1.0, da);
                }
                if let Some(db) = acc!(*b) {
                    kernels::gemm(1.0, self.data(*a), Layout::transposed(m, k), g, Layout::row_major(m, n), 1.0, db);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], self.shape(*b)[2]);
                if let Some(da) = acc!(*a) {
                    let bd = self.data(*b);
                    for i in 0..bs {
                        kernels::gemm(1.0, &g[i * m * n..(i + 1) * m * n], Layout::row_major(m, n), &bd[i * k * n..(i + 1) * k * n], Layout::transposed(k, n), 1.0, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(db) = acc!(*b) {
                    let ad = self.data(*a);
                    for i in 0..bs {
                        kernels::gemm(1.0, &ad[i * m * k..(i + 1) * m * k], Layout::transposed(m, k), &g[i * m * n..(i + 1) * m * n], Layout::row_major(m, n), 1.0, &mut db[i * k * n..(i + 1) * k * n]);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(dx) = acc!(*x) {
                    for b in 0..dx.len() / (r * c) {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                dx[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Broadcast(x) => {
                if let Some(dx) = acc!(*x) {
                    let n = dx.len();
                    for chunk in g.chunks(n) {
                        dx.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc!(*a) {
                    let bd = self.data(*b);
                    for ((d, g), b) in da.iter_mut().zip(g).zip(bd) {
                        *d += g * b;
                    }
                }
                if let Some(db) = acc!(*b) {
                    let ad = self.data(*a);
                    for ((d, g), a) in db.iter_mut().zip(g).zip(ad) {
                        *d += g * a;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(dx) = acc!(*x) {
                    for ((d, g), x) in dx.iter_mut().zip(g).zip(xd) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                if let Some(dx) = acc!(*x) {
                    for ((d, g), x) in dx.iter_mut().zip(g).zip(xd) {
                        *d += g / x;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.data(*x);
                if let Some(dx) = acc!(*x) {
                    for ((d, g), x) in dx.iter_mut().zip(g).zip(xd) {
                        if x >= lo && x <= hi {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = acc!(*x) {
                    let s = g[0] / dx.len() as Real;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumLast(x) => {
                let n = last_dim(self.shape(*x));
                if let Some(dx) = acc!(*x) {
                    for (row, g) in dx.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = last_dim(node.value.shape());
                if let Some(dx) = acc!(*x) {
                    for ((d, g), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: Real = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax(x, include) => {
                let n = node.value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    for r in 0..dx.len() / n {
                        let mask = &include[r * n..(r + 1) * n];
                        let gs: Real = (0..n).filter(|&c| mask[c]).map(|c| g[r * n + c]).sum();
                        for c in (0..n).filter(|&c| mask[c]) {
                            dx[r * n + c] += g[r * n + c] - y[r * n + c].exp() * gs;
                        }
                    }
                }
            }
            Op::NormalizeRows(x, eps) => {
                let n = last_dim(node.value.shape());
                let xd = self.data(*x);
                if let Some(dx) = acc!(*x) {
                    for ((d, g), x) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xd.chunks(n)) {
                        let norm = x.iter().map(|v| v * v).sum::<Real>().sqrt();
                        let s = norm + eps;
                        let dot: Real = x.iter().zip(g).map(|(x, g)| x * g).sum();
                        let coef = if norm > 0.0 { dot / (s * s * norm) } else { 0.0 };
                        for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                            *d += g / s - x * coef;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    if let Some(dv) = acc!(v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (dst, g) in dv[o * d * inner..(o + 1) * d * inner].iter_mut().zip(&g[src..src + d * inner]) {
                                *dst += g;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, d, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = acc!(*x) {
                    for o in 0..outer {
                        let to = (o * d + start) * inner;
                        for (dst, g) in dx[to..to + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *dst += g;
                        }
                    }
                }
            }
            Op::IndexRows(x, rows) => {
                let n = self.shape(*x)[1];
                if let Some(dx) = acc!(*x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            dx[r * n + c] += g[k * n + c];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let sx = self.shape(*x);
                let n = sx[0];
                let cout = self.shape(*w)[0];
                let (k, p) = (geom.patch_len(), geom.out_len());
                let img = sx[1] * sx[2] * sx[3];
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut cols = vec![0.0; k * p];
                if let Some(dw) = acc!(*w) {
                    for i in 0..n {
                        kernels::im2col(geom, &xd[i * img..(i + 1) * img], &mut cols);
                        kernels::gemm(1.0, &g[i * cout * p..(i + 1) * cout * p], Layout::row_major(cout, p), &cols, Layout::transposed(k, p), 1.0, dw);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for i in 0..n {
                        kernels::gemm(1.0, wd, Layout::transposed(cout, k), &g[i * cout * p..(i + 1) * cout * p], Layout::row_major(cout, p), 0.0, &mut cols);
                        kernels::col2im(geom, &cols, &mut dx[i * img..(i + 1) * img]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax, .. } => {
                if let Some(dx) = acc!(*x) {
                    for (&at, g) in argmax.iter().zip(g) {
                        dx[at] += g;
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    for (idx, chunk) in g.chunks(plane).enumerate() {
                        db[idx % c] += chunk.iter().sum::<Real>();
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
