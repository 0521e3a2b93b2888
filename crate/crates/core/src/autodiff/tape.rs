use alloc::vec;
use alloc::vec::Vec;

use super::{Tensor, BATCH_NORM_EPS, LAYER_NORM_EPS};
use crate::error::bail;
use crate::rng::SeededRng;
use crate::spectral::{bin_count, irfft_interleaved, rfft_interleaved};
use crate::Result;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch norm, for the caller's
/// running-average update. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, inner: usize, cols: usize, b_transposed: bool },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulPrefix { a: Var, w: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    Slice { a: Var, outer: usize, src_width: usize, offset: usize, width: usize },
    Pad { a: Var, outer: usize, before: usize, width: usize, dst_width: usize },
    Reshape { a: Var },
    Sigmoid { a: Var },
    Gelu { a: Var },
    Log { a: Var },
    Softmax { a: Var, width: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, width: usize, skip_first: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, width: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, channels: usize, train: bool, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Conv1d { x: Var, w: Var, batch: usize, len: usize, cin: usize, cout: usize, kernel: usize },
    Sum { a: Var },
    Mean { a: Var },
    MeanLast { a: Var, width: usize },
    Embedding { table: Var, ids: Vec<usize>, d: usize },
    Rfft { a: Var, batch: usize, n: usize, d: usize },
    Irfft { a: Var, batch: usize, n: usize, d: usize },
    IrfftAt { a: Var, batch: usize, d: usize, coef: Vec<(f64, f64)> },
    ComplexMul { a: Var, b: Var },
    RealToComplex { a: Var },
    ComplexAbs { a: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Single-threaded; build a fresh tape per
/// batch.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn suffix_of(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn prefix_of(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[..small.len()] == *small
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `c (rows x cols) += a (rows x inner) * b`, with `b` either
/// `(inner x cols)` or, transposed, `(cols x inner)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    rows: usize,
    inner: usize,
    cols: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if rows == 0 || cols == 0 {
        return;
    }
    // SAFETY: every caller passes buffers whose extents match the given
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// `a (.., inner) x b (inner, cols)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (.., inner) x b^T` where `b` is `(cols, inner)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            bail!(Shape, "matmul needs (.., k) x (k, n), got {sa:?} x {sb:?}");
        }
        let inner = sa[sa.len() - 1];
        let (b_inner, cols) = if b_transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if inner != b_inner {
            bail!(Shape, "matmul inner dimensions differ: {sa:?} x {sb:?} (transposed={b_transposed})");
        }
        let rows = self.value(a).len() / inner.max(1);
        let mut out = vec![0.0; rows * cols];
        let b_strides = if b_transposed { (1, inner as isize) } else { (cols as isize, 1) };
        gemm(rows, inner, cols, self.value(a), (inner as isize, 1), self.value(b), b_strides, &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = cols;
        Ok(self.push(shape, out, Op::MatMul { a, b, rows, inner, cols, b_transposed }, &[a, b]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            bail!(Shape, "transpose needs a 2-D tensor, got {s:?}");
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, &[a]))
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !suffix_of(self.shape(a), self.shape(b)) {
            bail!(Shape, "add: {:?} does not broadcast into {:?}", self.shape(b), self.shape(a));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len().max(1))
            .flat_map(|ch| ch.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Element-wise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !suffix_of(self.shape(a), self.shape(b)) {
            bail!(Shape, "mul: {:?} does not broadcast into {:?}", self.shape(b), self.shape(a));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len().max(1))
            .flat_map(|ch| ch.iter().zip(bv).map(|(x, y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    /// Scales each block of `a` by one entry of `w`, whose shape is a
    /// prefix of `a`'s (e.g. a per-row weight of shape `(batch,)`).
    pub fn mul_prefix(&mut self, a: Var, w: Var) -> Result<Var> {
        if !prefix_of(self.shape(a), self.shape(w)) {
            bail!(Shape, "mul_prefix: {:?} is not a prefix of {:?}", self.shape(w), self.shape(a));
        }
        let wv = self.value(w);
        let inner = self.value(a).len() / wv.len().max(1);
        let out: Vec<f64> = self
            .value(a)
            .chunks(inner.max(1))
            .zip(wv)
            .flat_map(|(ch, s)| ch.iter().map(move |x| x * s))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulPrefix { a, w }, &[a, w]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar { a }, &[a])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            bail!(Shape, "concat axis {axis} out of range for {base:?}");
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &x)| i != axis && x != base[i]) {
                bail!(Shape, "concat: {s:?} incompatible with {base:?} on axis {axis}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), outer, widths }, parts))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            bail!(Shape, "slice {start}..{end} on axis {axis} of {s:?}");
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src_width = len * inner;
        let offset = start * inner;
        let width = (end - start) * inner;
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&src[o * src_width + offset..o * src_width + offset + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(shape, out, Op::Slice { a, outer, src_width, offset, width }, &[a]))
    }

    /// Zero-pads `before` and `after` entries around `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            bail!(Shape, "pad axis {axis} out of range for {s:?}");
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let width = len * inner;
        let dst_width = (before + len + after) * inner;
        let mut out = vec![0.0; outer * dst_width];
        let src = self.value(a);
        for o in 0..outer {
            let d0 = o * dst_width + before * inner;
            out[d0..d0 + width].copy_from_slice(&src[o * width..(o + 1) * width]);
        }
        let mut shape = s;
        shape[axis] = before + len + after;
        Ok(self.push(shape, out, Op::Pad { a, outer, before: before * inner, width, dst_width }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            bail!(Shape, "cannot reshape {:?} into {shape:?}", self.shape(a));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid { a }, &[a])
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
            bail!(Numeric, "log of non-positive value {bad}");
        }
        let out = self.value(a).iter().map(|&x| libm::log(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Log { a }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let Some(&width) = self.shape(a).last() else {
            bail!(Shape, "softmax of a scalar");
        };
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax { a, width }, &[a]))
    }

    /// Batch-mean of `-log softmax(logits)[target]` over rows of a
    /// `(batch, V)` logit matrix. With `skip_first`, column 0 (padding) is
    /// left out of the normalizer and may not be a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], skip_first: bool) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            bail!(Shape, "cross_entropy needs (batch, V) logits for {} targets, got {s:?}", targets.len());
        }
        let (batch, width) = (s[0], s[1]);
        let lo = usize::from(skip_first);
        if width <= lo {
            bail!(Shape, "cross_entropy over an empty vocabulary");
        }
        for &t in targets {
            if t < lo || t >= width {
                bail!(Data, "target {t} outside [{lo}, {width})");
            }
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; batch * width];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &z[b * width + lo..(b + 1) * width];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| libm::exp(v - mx)).sum();
            let lse = mx + libm::log(sum);
            for (j, &v) in row.iter().enumerate() {
                probs[b * width + lo + j] = libm::exp(v - lse);
            }
            loss += lse - z[b * width + targets[b]];
        }
        let value = vec![loss / batch.max(1) as f64];
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, width, skip_first };
        Ok(self.push(vec![], value, op, &[logits]))
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let Some(&width) = self.shape(x).last() else {
            bail!(Shape, "layer_norm of a scalar");
        };
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            bail!(Shape, "layer_norm affine must have shape [{width}]");
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let rows = xs.len() / width.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = inv;
            for j in 0..width {
                let h = (row[j] - mean) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, width, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Batch normalization of a channels-last `(batch, len, channels)`
    /// tensor, with statistics per channel over batch and length. In
    /// training mode the batch statistics are returned for the caller's
    /// running averages; otherwise `running` is applied as a fixed affine.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        train: bool,
        running: (&[f64], &[f64]),
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        let Some(&channels) = s.last() else {
            bail!(Shape, "batch_norm of a scalar");
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            bail!(Shape, "batch_norm affine must have shape [{channels}]");
        }
        if running.0.len() != channels || running.1.len() != channels {
            bail!(Shape, "batch_norm running statistics must have {channels} entries");
        }
        let xs = self.value(x);
        let count = xs.len() / channels.max(1);
        let (mean, var) = if train {
            let mut mean = vec![0.0; channels];
            for row in xs.chunks(channels) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; channels];
            for row in xs.chunks(channels) {
                for c in 0..channels {
                    let dv = row[c] - mean[c];
                    var[c] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BATCH_NORM_EPS)).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, v) in xs.iter().enumerate() {
            let c = i % channels;
            let h = (v - mean[c]) * inv_std[c];
            xhat[i] = h;
            out[i] = h * g[c] + bt[c];
        }
        let stats = train.then(|| {
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            BatchStats { mean, var: var.iter().map(|v| v * unbias).collect() }
        });
        let op = Op::BatchNorm { x, gamma, beta, channels, train, xhat, inv_std };
        Ok((self.push(s, out, op, &[x, gamma, beta]), stats))
    }

    /// Inverted dropout. Returns `a` itself when inactive.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {rate} outside [0, 1)");
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(a).len()).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit pre-scaled mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            bail!(Shape, "dropout mask of {} for {} values", mask.len(), self.value(a).len());
        }
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Dropout { a, mask }, &[a]))
    }

    /// Same-padded 1-D convolution over the middle axis of a channels-last
    /// `(batch, len, cin)` tensor with kernel `(cout, cin, k)`, `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sw[2].is_multiple_of(2) {
            bail!(Shape, "conv1d needs (b, len, cin) and (cout, cin, odd k), got {sx:?}, {sw:?}");
        }
        let (batch, len, cin) = (sx[0], sx[1], sx[2]);
        let (cout, kernel) = (sw[0], sw[2]);
        let cols = im2col(self.value(x), batch, len, cin, kernel);
        let mut out = vec![0.0; batch * len * cout];
        let ck = cin * kernel;
        gemm(batch * len, ck, cout, &cols, (ck as isize, 1), self.value(w), (1, ck as isize), &mut out, 0.0);
        let op = Op::Conv1d { x, w, batch, len, cin, cout, kernel };
        Ok(self.push(vec![batch, len, cout], out, op, &[x, w]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![], vec![s], Op::Mean { a }, &[a])
    }

    /// Mean over the last axis, which is removed.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some((&width, rest)) = s.split_last() else {
            bail!(Shape, "mean_last of a scalar");
        };
        let out = self.value(a).chunks(width.max(1)).map(|r| r.iter().sum::<f64>() / width as f64).collect();
        Ok(self.push(rest.to_vec(), out, Op::MeanLast { a, width }, &[a]))
    }

    /// Gathers rows of a `(V, d)` table; output shape `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            bail!(Shape, "embedding needs a (V, d) table and matching id shape");
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            bail!(Data, "item id {bad} outside embedding table of {rows} rows");
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(shape, out, Op::Embedding { table, ids: ids.to_vec(), d }, &[table]))
    }

    /// Unitary real FFT along axis 1: `(batch, n, d)` to `(batch, m, d, 2)`.
    pub fn rfft(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] == 0 {
            bail!(Shape, "rfft needs (batch, n >= 1, d), got {s:?}");
        }
        let (batch, n, d) = (s[0], s[1], s[2]);
        let m = bin_count(n);
        let mut out = vec![0.0; batch * m * d * 2];
        rfft_interleaved(self.value(a), batch, n, d, &mut out);
        Ok(self.push(vec![batch, m, d, 2], out, Op::Rfft { a, batch, n, d }, &[a]))
    }

    /// Inverse of [`Tape::rfft`] back to length `n`.
    pub fn irfft(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[3] != 2 || n == 0 || s[1] != bin_count(n) {
            bail!(Shape, "irfft to length {n} needs (batch, {}, d, 2), got {s:?}", bin_count(n));
        }
        let (batch, d) = (s[0], s[2]);
        let mut out = vec![0.0; batch * n * d];
        irfft_interleaved(self.value(a), batch, n, d, &mut out);
        Ok(self.push(vec![batch, n, d], out, Op::Irfft { a, batch, n, d }, &[a]))
    }

    /// Position `t` of [`Tape::irfft`] to length `n`, `(batch, d)`, without
    /// computing the other positions.
    pub fn irfft_at(&mut self, a: Var, n: usize, t: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[3] != 2 || n == 0 || s[1] != bin_count(n) {
            bail!(Shape, "irfft to length {n} needs (batch, {}, d, 2), got {s:?}", bin_count(n));
        }
        if t >= n {
            bail!(Index, "position {t} outside length {n}");
        }
        let (batch, m, d) = (s[0], s[1], s[2]);
        // x[t] = sum_k c_k (re_k cos - im_k sin) / sqrt(n), c_k = 2 for bins
        // with a distinct mirror
        let scale = 1.0 / libm::sqrt(n as f64);
        let coef: Vec<(f64, f64)> = (0..m)
            .map(|k| {
                let c = if k == 0 || 2 * k == n { scale } else { 2.0 * scale };
                let theta = 2.0 * core::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                (c * libm::cos(theta), -c * libm::sin(theta))
            })
            .collect();
        let av = self.value(a);
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let row = &mut out[b * d..(b + 1) * d];
            for (k, &(cr, ci)) in coef.iter().enumerate() {
                let src = &av[(b * m + k) * d * 2..(b * m + k + 1) * d * 2];
                for (o, z) in row.iter_mut().zip(src.chunks_exact(2)) {
                    *o += cr * z[0] + ci * z[1];
                }
            }
        }
        Ok(self.push(vec![batch, d], out, Op::IrfftAt { a, batch, d, coef }, &[a]))
    }

    /// Complex product of interleaved tensors; `b` may broadcast over
    /// leading axes of `a`.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.last() != Some(&2) || !suffix_of(sa, sb) {
            bail!(Shape, "complex_mul: {sb:?} does not broadcast into complex {sa:?}");
        }
        let bv = self.value(b);
        let mut out = Vec::with_capacity(self.value(a).len());
        for ch in self.value(a).chunks(bv.len()) {
            for (x, y) in ch.chunks_exact(2).zip(bv.chunks_exact(2)) {
                out.push(x[0] * y[0] - x[1] * y[1]);
                out.push(x[0] * y[1] + x[1] * y[0]);
            }
        }
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::ComplexMul { a, b }, &[a, b]))
    }

    /// Real tensor to complex with zero imaginary part (new last axis).
    pub fn real_to_complex(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().flat_map(|&x| [x, 0.0]).collect();
        let mut shape = self.shape(a).to_vec();
        shape.push(2);
        self.push(shape, out, Op::RealToComplex { a }, &[a])
    }

    /// Modulus of an interleaved complex tensor (drops the last axis).
    pub fn complex_abs(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.last() != Some(&2) {
            bail!(Shape, "complex_abs needs a trailing (re, im) axis, got {s:?}");
        }
        let out = self.value(a).chunks_exact(2).map(|p| libm::hypot(p[0], p[1])).collect();
        Ok(self.push(s[..s.len() - 1].to_vec(), out, Op::ComplexAbs { a }, &[a]))
    }

    /// Reverse pass from a scalar loss. Consumes the recording: a second
    /// call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            bail!(State, "backward already ran on this tape");
        }
        if loss.0 >= self.nodes.len() {
            bail!(State, "loss node was not recorded on this tape");
        }
        if self.node(loss).value.len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.node(loss).shape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v`; zeros for nodes the loss
    /// does not depend on.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let Some(grads) = &self.grads else {
            bail!(State, "gradients requested before backward");
        };
        Ok(match grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.value(v).len()],
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, inner, cols, b_transposed } => {
                let (av, bv) = (self.value(a), self.value(b));
                // dA = G B^T
                acc(a, &mut |ga| {
                    let bs = if b_transposed { (inner as isize, 1) } else { (1, cols as isize) };
                    gemm(rows, cols, inner, g, (cols as isize, 1), bv, bs, ga, 1.0);
                });
                // dB = A^T G, or (G^T A) when B is stored transposed
                acc(b, &mut |gb| {
                    if b_transposed {
                        gemm(cols, rows, inner, g, (1, cols as isize), av, (inner as isize, 1), gb, 1.0);
                    } else {
                        gemm(inner, rows, cols, av, (1, inner as isize), g, (cols as isize, 1), gb, 1.0);
                    }
                });
            }
            &Op::Transpose { a, rows, cols } => acc(a, &mut |ga| {
                for i in 0..rows {
                    for j in 0..cols {
                        ga[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| {
                    for ch in g.chunks(gb.len()) {
                        gb.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k] * bv[k % bv.len()];
                    }
                });
                acc(b, &mut |gb| {
                    let w = gb.len();
                    for (k, (gk, ak)) in g.iter().zip(av).enumerate() {
                        gb[k % w] += gk * ak;
                    }
                });
            }
            &Op::MulPrefix { a, w } => {
                let (av, wv) = (self.value(a), self.value(w));
                let inner = av.len() / wv.len().max(1);
                acc(a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k] * wv[k / inner];
                    }
                });
                acc(w, &mut |gw| {
                    for (r, x) in gw.iter_mut().enumerate() {
                        let span = r * inner..(r + 1) * inner;
                        *x += g[span.clone()].iter().zip(&av[span]).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor)),
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
            Op::Concat { parts, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + w];
                            gp[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { a, outer, src_width, offset, width } => acc(a, &mut |ga| {
                for o in 0..outer {
                    let dst = &mut ga[o * src_width + offset..o * src_width + offset + width];
                    dst.iter_mut().zip(&g[o * width..(o + 1) * width]).for_each(|(x, y)| *x += y);
                }
            }),
            &Op::Pad { a, outer, before, width, dst_width } => acc(a, &mut |ga| {
                for o in 0..outer {
                    let src = &g[o * dst_width + before..o * dst_width + before + width];
                    ga[o * width..(o + 1) * width].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }),
            &Op::Sigmoid { a } => acc(a, &mut |ga| {
                for (k, x) in ga.iter_mut().enumerate() {
                    let y = node.value[k];
                    *x += g[k] * y * (1.0 - y);
                }
            }),
            &Op::Gelu { a } => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k] * gelu_grad(av[k]);
                    }
                })
            }
            &Op::Log { a } => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k] / av[k];
                    }
                })
            }
            &Op::Softmax { a, width } => acc(a, &mut |ga| {
                for (r, (gr, yr)) in g.chunks(width).zip(node.value.chunks(width)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..width {
                        ga[r * width + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::CrossEntropy { logits, targets, probs, width, skip_first } => {
                let scale = g[0] / targets.len().max(1) as f64;
                let lo = usize::from(*skip_first);
                acc(*logits, &mut |gl| {
                    for (b, &t) in targets.iter().enumerate() {
                        for j in lo..*width {
                            gl[b * width + j] += scale * probs[b * width + j];
                        }
                        gl[b * width + t] -= scale;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, width, xhat, inv_std } => {
                let w = *width;
                let gv = self.value(*gamma);
                acc(*gamma, &mut |gg| {
                    for (k, y) in g.iter().enumerate() {
                        gg[k % w] += y * xhat[k];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (k, y) in g.iter().enumerate() {
                        gb[k % w] += y;
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; w];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * w..(r + 1) * w;
                        let xh = &xhat[span.clone()];
                        for j in 0..w {
                            dxhat[j] = g[r * w + j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(p, q)| p * q).sum();
                        for j in 0..w {
                            gx[r * w + j] += inv / w as f64 * (w as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, channels, train, xhat, inv_std } => {
                let c = *channels;
                let gv = self.value(*gamma);
                acc(*gamma, &mut |gg| {
                    for (k, y) in g.iter().enumerate() {
                        gg[k % c] += y * xhat[k];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (k, y) in g.iter().enumerate() {
                        gb[k % c] += y;
                    }
                });
                acc(*x, &mut |gx| {
                    if *train {
                        let count = (g.len() / c) as f64;
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for (k, y) in g.iter().enumerate() {
                            let d = y * gv[k % c];
                            s1[k % c] += d;
                            s2[k % c] += d * xhat[k];
                        }
                        for (k, y) in g.iter().enumerate() {
                            let ch = k % c;
                            let d = y * gv[ch];
                            gx[k] += inv_std[ch] / count * (count * d - s1[ch] - xhat[k] * s2[ch]);
                        }
                    } else {
                        for (k, y) in g.iter().enumerate() {
                            gx[k] += y * gv[k % c] * inv_std[k % c];
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |ga| {
                for (k, x) in ga.iter_mut().enumerate() {
                    *x += g[k] * mask[k];
                }
            }),
            &Op::Conv1d { x, w, batch, len, cin, cout, kernel } => {
                let ck = cin * kernel;
                let rows = batch * len;
                let cols = im2col(self.value(x), batch, len, cin, kernel);
                // dW (cout x ck) = G^T cols
                acc(w, &mut |gw| {
                    gemm(cout, rows, ck, g, (1, cout as isize), &cols, (ck as isize, 1), gw, 1.0);
                });
                let wv = self.value(w);
                acc(x, &mut |gx| {
                    let mut gcols = vec![0.0; rows * ck];
                    gemm(rows, cout, ck, g, (cout as isize, 1), wv, (ck as isize, 1), &mut gcols, 0.0);
                    col2im_add(&gcols, gx, batch, len, cin, kernel);
                });
            }
            &Op::Sum { a } => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean { a } => acc(a, &mut |ga| {
                let s = g[0] / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|x| *x += s)
            }),
            &Op::MeanLast { a, width } => acc(a, &mut |ga| {
                for (k, x) in ga.iter_mut().enumerate() {
                    *x += g[k / width] / width as f64;
                }
            }),
            Op::Embedding { table, ids, d } => acc(*table, &mut |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, y)| *x += y);
                }
            }),
            &Op::Rfft { a, batch, n, d } => acc(a, &mut |ga| {
                // adjoint of the half-spectrum map: interior bins count twice in
                // the inverse, so halve them before inverting
                let m = bin_count(n);
                let mut gs = g.to_vec();
                for b in 0..batch {
                    for k in 1..m {
                        if 2 * k == n {
                            continue;
                        }
                        for j in 0..d {
                            let idx = ((b * m + k) * d + j) * 2;
                            gs[idx] *= 0.5;
                            gs[idx + 1] *= 0.5;
                        }
                    }
                }
                let mut tmp = vec![0.0; batch * n * d];
                irfft_interleaved(&gs, batch, n, d, &mut tmp);
                ga.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }),
            &Op::Irfft { a, batch, n, d } => acc(a, &mut |ga| {
                let m = bin_count(n);
                let mut tmp = vec![0.0; batch * m * d * 2];
                rfft_interleaved(g, batch, n, d, &mut tmp);
                for b in 0..batch {
                    for k in 0..m {
                        let edge = k == 0 || 2 * k == n;
                        for j in 0..d {
                            let idx = ((b * m + k) * d + j) * 2;
                            if edge {
                                ga[idx] += tmp[idx];
                            } else {
                                ga[idx] += 2.0 * tmp[idx];
                                ga[idx + 1] += 2.0 * tmp[idx + 1];
                            }
                        }
                    }
                }
            }),
            Op::IrfftAt { a, batch, d, coef } => acc(*a, &mut |ga| {
                let (m, d) = (coef.len(), *d);
                for b in 0..*batch {
                    let gb = &g[b * d..(b + 1) * d];
                    for (k, &(cr, ci)) in coef.iter().enumerate() {
                        let dst = &mut ga[(b * m + k) * d * 2..(b * m + k + 1) * d * 2];
                        for (z, &gv) in dst.chunks_exact_mut(2).zip(gb) {
                            z[0] += cr * gv;
                            z[1] += ci * gv;
                        }
                    }
                }
            }),
            &Op::ComplexMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let wb = bv.len();
                acc(a, &mut |ga| {
                    for k in (0..ga.len()).step_by(2) {
                        let (gr, gi) = (g[k], g[k + 1]);
                        let (br, bi) = (bv[k % wb], bv[k % wb + 1]);
                        ga[k] += gr * br + gi * bi;
                        ga[k + 1] += gi * br - gr * bi;
                    }
                });
                acc(b, &mut |gb| {
                    for k in (0..av.len()).step_by(2) {
                        let (gr, gi) = (g[k], g[k + 1]);
                        let (ar, ai) = (av[k], av[k + 1]);
                        gb[k % wb] += gr * ar + gi * ai;
                        gb[k % wb + 1] += gi * ar - gr * ai;
                    }
                });
            }
            &Op::RealToComplex { a } => acc(a, &mut |ga| {
                for (k, x) in ga.iter_mut().enumerate() {
                    *x += g[2 * k];
                }
            }),
            &Op::ComplexAbs { a } => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for (k, &r) in node.value.iter().enumerate() {
                        if r > 0.0 {
                            ga[2 * k] += g[k] * av[2 * k] / r;
                            ga[2 * k + 1] += g[k] * av[2 * k + 1] / r;
                        }
                    }
                })
            }
        }
    }
}

/// Rows `(b, i)`, columns `(c, j)`: `x[b, i + j - k/2, c]` or zero.
fn im2col(x: &[f64], batch: usize, len: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let ck = cin * kernel;
    let mut cols = vec![0.0; batch * len * ck];
    for b in 0..batch {
        for i in 0..len {
            let row = &mut cols[(b * len + i) * ck..(b * len + i + 1) * ck];
            for j in 0..kernel {
                let Some(src) = (i + j).checked_sub(half).filter(|&s| s < len) else { continue };
                let xs = &x[(b * len + src) * cin..(b * len + src + 1) * cin];
                for c in 0..cin {
                    row[c * kernel + j] = xs[c];
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], gx: &mut [f64], batch: usize, len: usize, cin: usize, kernel: usize) {
    let half = kernel / 2;
    let ck = cin * kernel;
    for b in 0..batch {
        for i in 0..len {
            let row = &cols[(b * len + i) * ck..(b * len + i + 1) * ck];
            for j in 0..kernel {
                let Some(src) = (i + j).checked_sub(half).filter(|&s| s < len) else { continue };
                let dst = &mut gx[(b * len + src) * cin..(b * len + src + 1) * cin];
                for c in 0..cin {
                    dst[c] += row[c * kernel + j];
                }
            }
        }
    }
}
