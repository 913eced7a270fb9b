//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node to the [`Tape`] and returns a [`Var`]
//! handle. Node inputs always precede the node itself, so walking the tape
//! backwards from the root visits nodes in reverse topological order.
//! Gradients fan in additively.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulSorted(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    SlidingMean {
        x: Var,
        width: usize,
    },
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    Stack(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<Var>),
    Permute3 {
        x: Var,
        perm: [usize; 3],
    },
    Reshape(Var),
    Cosine(Var, Var),
    LogSumExp(Var),
    Select {
        x: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor; nodes the root does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// `c (+)= op(a) · op(b)` for row-major buffers, `op(a)` being `m×k` and
/// `op(b)` being `k×n`. A transposed operand is stored in its untransposed
/// layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    gemm_layout(m, k, n, a, trans_a, b, trans_b, c, false, accumulate)
}

/// [`gemm`] that can also write the product transposed (`c` holds `n×m`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_layout(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    trans_c: bool,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let (rsc, csc) = if trans_c { (1, m as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three buffers, and `c` does not alias `a` or `b`.
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
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Offsets `lo..=hi` of a centered window of width `s`.
pub(crate) fn window_offsets(s: usize) -> (isize, isize) {
    let lo = -((s / 2) as isize);
    (lo, lo + s as isize - 1)
}

/// Copy of each `h×w` plane with `half` replicated edge cells on every side.
fn pad_planes(x: &[f64], planes: usize, h: usize, w: usize, half: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * half, w + 2 * half);
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = clamp_index(y as isize - half as isize, h);
            let row = &plane[sy * w..(sy + 1) * w];
            out.extend(std::iter::repeat(row[0]).take(half));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(row[w - 1]).take(half));
        }
    }
    out
}

/// Adds a gradient with respect to padded planes onto the unpadded planes,
/// routing every border cell to the edge cell it replicated.
fn fold_planes(padded: &[f64], dst: &mut [f64], planes: usize, h: usize, w: usize, half: usize) {
    let (ph, pw) = (h + 2 * half, w + 2 * half);
    for p in 0..planes {
        let src = &padded[p * ph * pw..(p + 1) * ph * pw];
        let plane = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = clamp_index(y as isize - half as isize, h);
            let row = &mut plane[sy * w..(sy + 1) * w];
            for x in 0..pw {
                row[clamp_index(x as isize - half as isize, w)] += src[y * pw + x];
            }
        }
    }
}

/// Same-size 2-D convolution with edge replication, `x: C×H×W`,
/// `w: Cout×C×k×k`, accumulated into `out: Cout×H×W`.
/// Patch matrix `[(ch, ki, kj)] × [y, x]` read from padded planes.
fn patches(padded: &[f64], c: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let pw = wd + 2 * (k / 2);
    let pplane = (h + 2 * (k / 2)) * pw;
    let mut cols = Vec::with_capacity(c * k * k * h * wd);
    for ch in 0..c {
        let src = &padded[ch * pplane..(ch + 1) * pplane];
        for ki in 0..k {
            for kj in 0..k {
                for y in 0..h {
                    let start = (y + ki) * pw + kj;
                    cols.extend_from_slice(&src[start..start + wd]);
                }
            }
        }
    }
    cols
}

/// Inverse of [`patches`]: accumulates a patch-matrix gradient into padded planes.
fn unpatch_add(cols: &[f64], padded: &mut [f64], c: usize, h: usize, wd: usize, k: usize) {
    let pw = wd + 2 * (k / 2);
    let pplane = (h + 2 * (k / 2)) * pw;
    let mut rows = cols.chunks_exact(wd);
    for ch in 0..c {
        let dst = &mut padded[ch * pplane..(ch + 1) * pplane];
        for ki in 0..k {
            for kj in 0..k {
                for y in 0..h {
                    let start = (y + ki) * pw + kj;
                    let src = rows.next().expect("patch row");
                    for (d, v) in dst[start..start + wd].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Rows of `x` (`len × width`) shifted by `offset` with edge replication.
fn shifted_rows(x: &[f64], len: usize, width: usize, offset: isize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * width);
    for t in 0..len {
        let src = clamp_index(t as isize + offset, len);
        out.extend_from_slice(&x[src * width..(src + 1) * width]);
    }
    out
}

fn permuted_strides(shape: &[usize], perm: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let strides = [shape[1] * shape[2], shape[2], 1];
    (
        [shape[perm[0]], shape[perm[1]], shape[perm[2]]],
        [strides[perm[0]], strides[perm[1]], strides[perm[2]]],
    )
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    /// Records an input; gradients flow into it only if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Smallest `|x|` over every input entry of a recorded ReLU, or `None`
    /// when the tape holds no ReLU.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).dims2()?;
        let (k2, n) = self.val(b).dims2()?;
        if self.val(a).ndim() != 2 || self.val(b).ndim() != 2 || k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut out, false);
        Ok(self.push_op(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Matrix product whose inner sums are accumulated in ascending value
    /// order. The result is bit-identical under any joint permutation of the
    /// columns of `a` and rows of `b`.
    pub fn matmul_sorted(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).dims2()?;
        let (k2, n) = self.val(b).dims2()?;
        if self.val(a).ndim() != 2 || self.val(b).ndim() != 2 || k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; m * n];
        let mut terms = vec![0.0; k];
        for i in 0..m {
            for j in 0..n {
                for (p, t) in terms.iter_mut().enumerate() {
                    *t = ad[i * k + p] * bd[p * n + j];
                }
                terms.sort_unstable_by(f64::total_cmp);
                out[i * n + j] = terms.iter().sum();
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulSorted(a, b),
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.ndim() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push_op(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "elementwise")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.val(a).dims2()?;
        if self.val(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for rows of width {n}",
                self.val(bias).shape()
            )));
        }
        let bd = self.val(bias).data();
        let data = self
            .val(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, data), Op::AddBias(a, bias), &[a, bias]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.val(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push_op(Tensor::from_parts(shape, data), op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let m = t.sum() / t.len() as f64;
        self.push_op(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (_, n) = t.dims2()?;
        if !t.is_finite() {
            return Err(Error::Degenerate("softmax of non-finite input".into()));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, data), Op::SoftmaxRows(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, n) = self.val(x).dims2()?;
        if self.val(gamma).shape() != [n] || self.val(beta).shape() != [n] {
            return Err(Error::Shape(format!("layer norm affine for width {n}")));
        }
        let xd = self.val(x).data();
        let (gd, bd) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::new();
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Same-length temporal convolution. `x` is `L×Din`, `w` is
    /// `k×Din×Dout` with odd `k`, `b` is `Dout`. Borders replicate the
    /// first and last frame.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.val(w).shape().to_vec();
        let xs = self.val(x).shape().to_vec();
        if ws.len() != 3 || ws[0] % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be k x Din x Dout with odd k, got {ws:?}"
            )));
        }
        if xs.len() != 2 || xs[1] != ws[1] || self.val(b).shape() != [ws[2]] {
            return Err(Error::Shape(format!(
                "conv1d input {xs:?} kernel {ws:?} bias {:?}",
                self.val(b).shape()
            )));
        }
        let (len, din, dout, k) = (xs[0], xs[1], ws[2], ws[0]);
        let half = (k / 2) as isize;
        let mut out = Vec::with_capacity(len * dout);
        for _ in 0..len {
            out.extend_from_slice(self.val(b).data());
        }
        for j in 0..k {
            let shifted = shifted_rows(self.val(x).data(), len, din, j as isize - half);
            let wj = &self.val(w).data()[j * din * dout..(j + 1) * din * dout];
            gemm(len, din, dout, &shifted, false, wj, false, &mut out, true);
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![len, dout], out),
            Op::Conv1d { x, w, b },
            &[x, w, b],
        ))
    }

    /// Same-size 2-D convolution over a `C×H×W` input with a
    /// `Cout×C×k×k` kernel (odd `k`) and edge-replicated borders.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.val(w).shape().to_vec();
        let xs = self.val(x).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "2-D kernel must be Cout x C x k x k with odd k, got {ws:?}"
            )));
        }
        if xs.len() != 3 || xs[0] != ws[1] || self.val(b).shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?} kernel {ws:?} bias {:?}",
                self.val(b).shape()
            )));
        }
        let (c, h, wd, cout, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        let hw = h * wd;
        let mut out = Vec::with_capacity(cout * hw);
        for &bias in self.val(b).data() {
            out.extend(std::iter::repeat(bias).take(hw));
        }
        let padded = pad_planes(self.val(x).data(), c, h, wd, k / 2);
        let cols = patches(&padded, c, h, wd, k);
        gemm_layout(hw, c * k * k, cout, &cols, true, self.val(w).data(), true, &mut out, true, true);
        Ok(self.push_op(
            Tensor::from_parts(vec![cout, h, wd], out),
            Op::Conv2d { x, w, b },
            &[x, w, b],
        ))
    }

    /// Centered sliding mean of width `width` along the rows of `x`, with
    /// edge replication. Even widths reach one row further back than forward.
    pub fn sliding_mean(&mut self, x: Var, width: usize) -> Result<Var> {
        if width == 0 {
            return Err(Error::Config("window width must be at least 1".into()));
        }
        let (len, d) = (self.val(x).rows(), self.val(x).cols());
        let (lo, hi) = window_offsets(width);
        let xd = self.val(x).data();
        let mut out = vec![0.0; len * d];
        let inv = 1.0 / width as f64;
        for t in 0..len {
            let dst = &mut out[t * d..(t + 1) * d];
            for o in lo..=hi {
                let src = clamp_index(t as isize + o, len);
                for (y, v) in dst.iter_mut().zip(&xd[src * d..(src + 1) * d]) {
                    *y += v;
                }
            }
            for y in dst.iter_mut() {
                *y *= inv;
            }
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            Op::SlidingMean { x, width },
            &[x],
        ))
    }

    /// Mean of rows `start..=end` of a matrix, as a vector.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x);
        let (rows, d) = t.dims2()?;
        if start > end || end >= rows {
            return Err(Error::Shape(format!(
                "row span [{start},{end}] outside {rows} rows"
            )));
        }
        let mut out = vec![0.0; d];
        for i in start..=end {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let n = (end - start + 1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push_op(Tensor::vector(out), Op::MeanRows { x, start, end }, &[x]))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("stack of zero tensors".into()))?;
        let inner = self.val(*first).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.val(*first).len());
        for p in parts {
            if self.val(*p).shape() != inner.as_slice() {
                return Err(Error::Shape(format!(
                    "stack {:?} with {inner:?}",
                    self.val(*p).shape()
                )));
            }
            data.extend_from_slice(self.val(*p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(self.push_op(Tensor::from_parts(shape, data), Op::Stack(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x);
        if t.ndim() != 2 || start >= end || end > t.shape()[1] {
            return Err(Error::Shape(format!(
                "columns {start}..{end} of {:?}",
                t.shape()
            )));
        }
        let data = (0..t.rows())
            .flat_map(|i| t.row(i)[start..end].iter().copied())
            .collect();
        let shape = vec![t.rows(), end - start];
        Ok(self.push_op(
            Tensor::from_parts(shape, data),
            Op::SliceCols { x, start, end },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let rows = self.val(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.val(*p);
            if t.ndim() != 2 || t.rows() != rows {
                return Err(Error::Shape(format!("concat_cols {:?}", t.shape())));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(*p).row(i));
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Axis permutation of a 3-D tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let t = self.val(x);
        let mut seen = [false; 3];
        perm.iter().for_each(|&p| {
            if p < 3 {
                seen[p] = true
            }
        });
        if t.ndim() != 3 || seen.contains(&false) {
            return Err(Error::Shape(format!("permute {perm:?} of {:?}", t.shape())));
        }
        let (dims, strides) = permuted_strides(t.shape(), perm);
        let src = t.data();
        let mut data = Vec::with_capacity(src.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(src[i * strides[0] + j * strides[1] + k * strides[2]]);
                }
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(dims.to_vec(), data),
            Op::Permute3 { x, perm },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// Cosine similarity of two equal-length vectors. Zero-norm inputs are
    /// rejected.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "cosine")?;
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let na = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
            return Err(Error::Degenerate(format!(
                "cosine similarity with norms {na} and {nb}"
            )));
        }
        let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
        // one square root keeps cos(a, a) exactly 1
        let sa: f64 = ad.iter().map(|v| v * v).sum();
        let sb: f64 = bd.iter().map(|v| v * v).sum();
        let c = (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0);
        Ok(self.push_op(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// `log Σ exp(x)` over all elements, stabilized by the maximum.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let d = self.val(x).data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push_op(Tensor::scalar(s), Op::LogSumExp(x), &[x])
    }

    /// Largest element; the gradient flows to the first maximizer.
    pub fn max(&mut self, x: Var) -> Var {
        let d = self.val(x).data();
        let mut index = 0;
        for (i, v) in d.iter().enumerate() {
            if *v > d[index] {
                index = i;
            }
        }
        let v = d[index];
        self.push_op(Tensor::scalar(v), Op::Select { x, index }, &[x])
    }

    /// Smallest element; the gradient flows to the first minimizer.
    pub fn min(&mut self, x: Var) -> Var {
        let d = self.val(x).data();
        let mut index = 0;
        for (i, v) in d.iter().enumerate() {
            if *v < d[index] {
                index = i;
            }
        }
        let v = d[index];
        self.push_op(Tensor::scalar(v), Op::Select { x, index }, &[x])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.val(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.val(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(s) = self.slot(grads, v) {
            for (i, gi) in s.iter_mut().enumerate() {
                *gi += f(i);
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::MatMulSorted(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, bd, true, s, true);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm(k, m, n, ad, true, g, false, s, true);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                self.accumulate(grads, *a, |idx| g[(idx % n) * m + idx / n]);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |i| g[i] * bd[i]);
                self.accumulate(grads, *b, |i| g[i] * ad[i]);
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                if let Some(s) = self.slot(grads, *b) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(si, gi)| *si += gi);
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |i| c * g[i]),
            Op::Exp(a) => self.accumulate(grads, *a, |i| g[i] * y[i]),
            Op::Tanh(a) => self.accumulate(grads, *a, |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Relu(a) => {
                let ad = self.val(*a).data();
                self.accumulate(grads, *a, |i| if ad[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.dims2().map(|d| d.1).unwrap_or(1);
                let dots: Vec<f64> = g
                    .chunks(n)
                    .zip(y.chunks(n))
                    .map(|(gr, yr)| gr.iter().zip(yr).map(|(p, q)| p * q).sum())
                    .collect();
                self.accumulate(grads, *a, |i| y[i] * (g[i] - dots[i / n]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.val(*gamma).len();
                let gd = self.val(*gamma).data();
                if let Some(s) = self.slot(grads, *beta) {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(si, gi)| *si += gi);
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            s[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for (r, ((grow, hrow), srow)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(s.chunks_mut(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = (0..n).map(|j| grow[j] * gd[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            srow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let ws = self.val(*w).shape();
                let (k, din, dout) = (ws[0], ws[1], ws[2]);
                let len = self.val(*x).shape()[0];
                let half = (k / 2) as isize;
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks(dout) {
                        s.iter_mut().zip(row).for_each(|(si, gi)| *si += gi);
                    }
                }
                let xd = self.val(*x).data();
                let wd = self.val(*w).data();
                for j in 0..k {
                    let off = j as isize - half;
                    let wj = &wd[j * din * dout..(j + 1) * din * dout];
                    if let Some(s) = self.slot(grads, *w) {
                        let shifted = shifted_rows(xd, len, din, off);
                        let sj = &mut s[j * din * dout..(j + 1) * din * dout];
                        gemm(din, len, dout, &shifted, true, g, false, sj, true);
                    }
                    if let Some(s) = self.slot(grads, *x) {
                        let mut dshift = vec![0.0; len * din];
                        gemm(len, dout, din, g, false, wj, true, &mut dshift, false);
                        for t in 0..len {
                            let src = clamp_index(t as isize + off, len);
                            for c in 0..din {
                                s[src * din + c] += dshift[t * din + c];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let ws = self.val(*w).shape();
                let xs = self.val(*x).shape();
                let (cout, c, k) = (ws[0], ws[1], ws[2]);
                let (h, wd) = (xs[1], xs[2]);
                let hw = h * wd;
                if let Some(s) = self.slot(grads, *b) {
                    for (si, plane) in s.iter_mut().zip(g.chunks(hw)) {
                        *si += plane.iter().sum::<f64>();
                    }
                }
                let needs_w = self.nodes[w.0].needs_grad;
                let needs_x = self.nodes[x.0].needs_grad;
                let half = k / 2;
                let ckk = c * k * k;
                if needs_w {
                    let padded = pad_planes(self.val(*x).data(), c, h, wd, half);
                    let cols = patches(&padded, c, h, wd, k);
                    let s = self.slot(grads, *w).expect("weight needs grad");
                    gemm_layout(ckk, hw, cout, &cols, false, g, true, s, true, true);
                }
                if needs_x {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm_layout(hw, cout, ckk, g, true, self.val(*w).data(), false, &mut dcols, true, false);
                    let mut dpad = vec![0.0; c * (h + 2 * half) * (wd + 2 * half)];
                    unpatch_add(&dcols, &mut dpad, c, h, wd, k);
                    let s = self.slot(grads, *x).expect("input needs grad");
                    fold_planes(&dpad, s, c, h, wd, half);
                }
            }
            Op::SlidingMean { x, width } => {
                let (len, d) = (self.val(*x).rows(), self.val(*x).cols());
                let (lo, hi) = window_offsets(*width);
                let inv = 1.0 / *width as f64;
                if let Some(s) = self.slot(grads, *x) {
                    for t in 0..len {
                        for o in lo..=hi {
                            let src = clamp_index(t as isize + o, len);
                            for c in 0..d {
                                s[src * d + c] += g[t * d + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::MeanRows { x, start, end } => {
                let d = self.val(*x).cols();
                let inv = 1.0 / (end - start + 1) as f64;
                if let Some(s) = self.slot(grads, *x) {
                    for i in *start..=*end {
                        for c in 0..d {
                            s[i * d + c] += g[c] * inv;
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                let n = self.val(parts[0]).len();
                for (p, chunk) in parts.iter().zip(g.chunks(n)) {
                    self.accumulate(grads, *p, |i| chunk[i]);
                }
            }
            Op::SliceCols { x, start, end } => {
                let cols = self.val(*x).cols();
                let w = end - start;
                if let Some(s) = self.slot(grads, *x) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            s[i * cols + start + j] += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    self.accumulate(grads, *p, |idx| g[(idx / w) * total + offset + idx % w]);
                    offset += w;
                }
            }
            Op::Permute3 { x, perm } => {
                let (dims, strides) = permuted_strides(self.val(*x).shape(), *perm);
                if let Some(s) = self.slot(grads, *x) {
                    let mut o = 0;
                    for i in 0..dims[0] {
                        for j in 0..dims[1] {
                            for k in 0..dims[2] {
                                s[i * strides[0] + j * strides[1] + k * strides[2]] += g[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |i| g[i]),
            Op::Cosine(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let na = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c = y[0];
                self.accumulate(grads, *a, |i| {
                    g[0] * (bd[i] / (na * nb) - c * ad[i] / (na * na))
                });
                self.accumulate(grads, *b, |i| {
                    g[0] * (ad[i] / (na * nb) - c * bd[i] / (nb * nb))
                });
            }
            Op::LogSumExp(x) => {
                let xd = self.val(*x).data();
                self.accumulate(grads, *x, |i| g[0] * (xd[i] - y[0]).exp());
            }
            Op::Select { x, index } => {
                if let Some(s) = self.slot(grads, *x) {
                    s[*index] += g[0];
                }
            }
        }
    }
}
