//! Define-by-run tape: every primitive records its inputs and output so the
//! backward pass can replay the graph in exact reverse order.
//!
//! The tape is rebuilt per forward pass. All accumulation runs in fixed node
//! order, so identical tapes produce bit-identical gradients.

use crate::error::{AmpError, Result};
use crate::fft;
use crate::kernels::{matmul_flat, transpose_flat};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MaxScalar(usize, f64),
    MatMul { a: usize, w: usize },
    LeakyRelu(usize, f64),
    Abs(usize),
    Sqrt(usize),
    MeanAxis { a: usize, axis: usize },
    VarAxis { a: usize, axis: usize },
    MeanAll(usize),
    AddBias { a: usize, bias: usize },
    BroadcastTrailing { a: usize, n: usize },
    BroadcastChannel { a: usize, c: usize },
    SliceTrailing { a: usize, start: usize, len: usize },
    ConcatTrailing { a: usize, b: usize },
    TransposeTrailing(usize),
    FlipTrailing(usize),
    MovingAvgTrailing { a: usize, kernel: usize },
    Dft(usize),
    IdftReal { a: usize, imag_peak: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but materializes zeros for unreached vars.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradient participation follows
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Peak |imaginary| discarded by an `idft_real` node, as a diagnostic.
    pub fn imag_residue(&self, v: Var) -> Option<f64> {
        match self.nodes[v.0].op {
            Op::IdftReal { imag_peak, .. } => Some(imag_peak),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(AmpError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0, c))
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.max(c), Op::MaxScalar(a.0, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    /// Matrix product of `a` (rank >= 2, trailing axes m x k, leading axes
    /// folded) with a rank-2 weight `w` (k x n).
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        if ta.rank() < 2 || tw.rank() != 2 || ta.last_dim() != tw.shape()[0] {
            return Err(AmpError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let k = tw.shape()[0];
        let n = tw.shape()[1];
        let m = ta.numel() / k;
        let data = matmul_flat(ta.data(), tw.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(Op::MatMul { a: a.0, w: w.0 }, value, rg))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(AmpError::InvalidShape {
                op: "mean_axis",
                shape: ta.shape().to_vec(),
                reason: format!("no axis {}", axis),
            });
        }
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        let x = ta.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        for v in &mut data {
            *v *= inv;
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MeanAxis { a: a.0, axis }, value, rg))
    }

    /// Population variance over one axis; the axis is removed from the shape.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(AmpError::InvalidShape {
                op: "var_axis",
                shape: ta.shape().to_vec(),
                reason: format!("no axis {}", axis),
            });
        }
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        let x = ta.data();
        let inv = 1.0 / n as f64;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut mean = 0.0;
                for k in 0..n {
                    mean += x[(o * n + k) * inner + i];
                }
                mean *= inv;
                let mut acc = 0.0;
                for k in 0..n {
                    let d = x[(o * n + k) * inner + i] - mean;
                    acc += d * d;
                }
                data[o * inner + i] = acc * inv;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::VarAxis { a: a.0, axis }, value, rg))
    }

    /// Mean over all elements; yields a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mean = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a.0), Tensor::scalar(mean), rg)
    }

    /// Sum over all elements (mean followed by a scale).
    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel() as f64;
        let m = self.mean_all(a);
        self.scale(m, n)
    }

    /// Add a rank-1 bias along the trailing axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if tb.rank() != 1 || ta.last_dim() != tb.numel() {
            return Err(AmpError::ShapeMismatch {
                op: "add_bias",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tb.numel();
        let rows = ta.numel() / n;
        let b = tb.data();
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(
            Op::AddBias {
                a: a.0,
                bias: bias.0,
            },
            value,
            rg,
        ))
    }

    /// Append a trailing axis of size `n` by repetition.
    pub fn broadcast_trailing(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(AmpError::InvalidArgument(
                "broadcast_trailing: n must be positive".into(),
            ));
        }
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.numel() * n);
        for &v in ta.data() {
            data.extend(std::iter::repeat(v).take(n));
        }
        let mut shape = ta.shape().to_vec();
        shape.push(n);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastTrailing { a: a.0, n }, value, rg))
    }

    /// Repeat a size-1 channel axis (second from the end) `c` times.
    pub fn broadcast_channel(&mut self, a: Var, c: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let r = ta.rank();
        if r < 2 || ta.shape()[r - 2] != 1 {
            return Err(AmpError::InvalidShape {
                op: "broadcast_channel",
                shape: ta.shape().to_vec(),
                reason: "expects a size-1 channel axis".into(),
            });
        }
        let l = ta.shape()[r - 1];
        let lead = ta.numel() / l;
        let x = ta.data();
        let mut data = Vec::with_capacity(ta.numel() * c);
        for ld in 0..lead {
            let row = &x[ld * l..(ld + 1) * l];
            for _ in 0..c {
                data.extend_from_slice(row);
            }
        }
        let mut shape = ta.shape().to_vec();
        shape[r - 2] = c;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastChannel { a: a.0, c }, value, rg))
    }

    /// Slice `[start, start+len)` along the trailing axis.
    pub fn slice_trailing(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let last = ta.last_dim();
        if start + len > last || len == 0 {
            return Err(AmpError::InvalidShape {
                op: "slice_trailing",
                shape: ta.shape().to_vec(),
                reason: format!("slice [{}, {}) out of range", start, start + len),
            });
        }
        let rows = ta.numel() / last;
        let x = ta.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * last + start..r * last + start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceTrailing {
                a: a.0,
                start,
                len,
            },
            value,
            rg,
        ))
    }

    /// Concatenate along the trailing axis.
    pub fn concat_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, rb) = (ta.rank(), tb.rank());
        if ra != rb || ra == 0 || ta.shape()[..ra - 1] != tb.shape()[..rb - 1] {
            return Err(AmpError::ShapeMismatch {
                op: "concat_trailing",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (la, lb) = (ta.last_dim(), tb.last_dim());
        let rows = ta.numel() / la;
        let (xa, xb) = (ta.data(), tb.data());
        let mut data = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            data.extend_from_slice(&xa[r * la..(r + 1) * la]);
            data.extend_from_slice(&xb[r * lb..(r + 1) * lb]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatTrailing { a: a.0, b: b.0 }, value, rg))
    }

    /// Swap the trailing two axes.
    pub fn transpose_trailing(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let r = ta.rank();
        if r < 2 {
            return Err(AmpError::InvalidShape {
                op: "transpose_trailing",
                shape: ta.shape().to_vec(),
                reason: "needs rank >= 2".into(),
            });
        }
        let (rows, cols) = (ta.shape()[r - 2], ta.shape()[r - 1]);
        let lead = ta.numel() / (rows * cols);
        let x = ta.data();
        let mut data = vec![0.0; ta.numel()];
        for ld in 0..lead {
            let src = &x[ld * rows * cols..(ld + 1) * rows * cols];
            let dst = &mut data[ld * rows * cols..(ld + 1) * rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::TransposeTrailing(a.0), value, rg))
    }

    /// Reindex the trailing axis as `k -> (K - k) mod K`.
    pub fn flip_trailing(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let last = ta.last_dim();
        let rows = ta.numel() / last;
        let x = ta.data();
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            for k in 0..last {
                data[r * last + k] = x[r * last + (last - k) % last];
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::FlipTrailing(a.0), value, rg))
    }

    /// Centered moving average along the trailing axis with replicate padding.
    pub fn moving_avg_trailing(&mut self, a: Var, kernel: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let last = ta.last_dim();
        if kernel % 2 == 0 || kernel == 0 || kernel > last {
            return Err(AmpError::InvalidArgument(format!(
                "moving_avg_trailing: kernel {} must be odd and <= {}",
                kernel, last
            )));
        }
        let rows = ta.numel() / last;
        let half = (kernel / 2) as isize;
        let inv = 1.0 / kernel as f64;
        let x = ta.data();
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let row = &x[r * last..(r + 1) * last];
            let out = &mut data[r * last..(r + 1) * last];
            for i in 0..last {
                let mut acc = 0.0;
                for t in -half..=half {
                    let j = (i as isize + t).clamp(0, last as isize - 1) as usize;
                    acc += row[j];
                }
                out[i] = acc * inv;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MovingAvgTrailing { a: a.0, kernel }, value, rg))
    }

    /// Unnormalized forward DFT of each trailing-axis row. The output trailing
    /// axis doubles: `[re(0..L) | im(0..L)]`.
    pub fn dft(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let l = ta.last_dim();
        if l == 0 {
            return Err(AmpError::InvalidShape {
                op: "dft",
                shape: ta.shape().to_vec(),
                reason: "empty trailing axis".into(),
            });
        }
        let rows = ta.numel() / l;
        let (re, im) = fft::dft_real_rows(ta.data(), rows, l);
        let mut data = Vec::with_capacity(rows * 2 * l);
        for r in 0..rows {
            data.extend_from_slice(&re[r * l..(r + 1) * l]);
            data.extend_from_slice(&im[r * l..(r + 1) * l]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 2 * l;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Dft(a.0), value, rg))
    }

    /// Inverse DFT (1/L convention) of packed `[re | im]` rows, returning the
    /// real part. The discarded peak |imaginary| is kept as a diagnostic.
    pub fn idft_real(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let last = ta.last_dim();
        if last == 0 || last % 2 != 0 {
            return Err(AmpError::InvalidShape {
                op: "idft_real",
                shape: ta.shape().to_vec(),
                reason: "trailing axis must be even (packed re|im)".into(),
            });
        }
        let l = last / 2;
        let rows = ta.numel() / last;
        let x = ta.data();
        let mut re_in = vec![0.0; rows * l];
        let mut im_in = vec![0.0; rows * l];
        for r in 0..rows {
            re_in[r * l..(r + 1) * l].copy_from_slice(&x[r * last..r * last + l]);
            im_in[r * l..(r + 1) * l].copy_from_slice(&x[r * last + l..(r + 1) * last]);
        }
        let (mut re, im) = fft::dft_complex_rows(&re_in, &im_in, rows, l, true);
        let inv = 1.0 / l as f64;
        let mut imag_peak: f64 = 0.0;
        for v in &mut re {
            *v *= inv;
        }
        for v in &im {
            imag_peak = imag_peak.max((v * inv).abs());
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = l;
        let value = Tensor::new(shape, re)?;
        let rg = self.rg(a);
        Ok(self.push(Op::IdftReal { a: a.0, imag_peak }, value, rg))
    }

    /// Mean squared error between two same-shape vars, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Mean absolute error between two same-shape vars, as a scalar.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let ad = self.abs(d);
        Ok(self.mean_all(ad))
    }

    /// Reverse pass from a scalar loss. Visits nodes in exact reverse creation
    /// order; a tensor consumed k times accumulates k contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(AmpError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        bufs[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if bufs[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = bufs[id].clone().unwrap();
            self.propagate(id, &g, &mut bufs);
        }

        let grads = bufs
            .into_iter()
            .enumerate()
            .map(|(id, b)| {
                b.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape always matches node value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, bufs: &mut [Option<Vec<f64>>], target: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let buf = bufs[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.numel()]);
        f(buf);
    }

    fn propagate(&self, id: usize, g: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        let value = &self.nodes[id].value;
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(bufs, a, |ga| {
                    for (gv, &gu) in ga.iter_mut().zip(g) {
                        *gv += gu;
                    }
                });
                self.accumulate(bufs, b, |gb| {
                    for (gv, &gu) in gb.iter_mut().zip(g) {
                        *gv += gu;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(bufs, a, |ga| {
                    for (gv, &gu) in ga.iter_mut().zip(g) {
                        *gv += gu;
                    }
                });
                self.accumulate(bufs, b, |gb| {
                    for (gv, &gu) in gb.iter_mut().zip(g) {
                        *gv -= gu;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * xb[i];
                    }
                });
                self.accumulate(bufs, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * xa[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / xb[i];
                    }
                });
                self.accumulate(bufs, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * xa[i] / (xb[i] * xb[i]);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                });
            }
            Op::MaxScalar(a, c) => {
                let x = self.nodes[a].value.data();
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > c {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul { a, w } => {
                let (ta, tw) = (&self.nodes[a].value, &self.nodes[w].value);
                let k = tw.shape()[0];
                let n = tw.shape()[1];
                let m = ta.numel() / k;
                if self.nodes[a].requires_grad {
                    let wt = transpose_flat(tw.data(), k, n);
                    let ga_new = matmul_flat(g, &wt, m, n, k);
                    self.accumulate(bufs, a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += ga_new[i];
                        }
                    });
                }
                if self.nodes[w].requires_grad {
                    let at = transpose_flat(ta.data(), m, k);
                    let gw_new = matmul_flat(&at, g, k, m, n);
                    self.accumulate(bufs, w, |gw| {
                        for i in 0..gw.len() {
                            gw[i] += gw_new[i];
                        }
                    });
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[a].value.data();
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * if x[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.nodes[a].value.data();
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = value.data();
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            ga[i] += g[i] * 0.5 / y[i];
                        }
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let shape = self.nodes[a].value.shape();
                let (outer, n, inner) = axis_split(shape, axis);
                let inv = 1.0 / n as f64;
                self.accumulate(bufs, a, |ga| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::VarAxis { a, axis } => {
                let ta = &self.nodes[a].value;
                let (outer, n, inner) = axis_split(ta.shape(), axis);
                let x = ta.data();
                let inv = 1.0 / n as f64;
                self.accumulate(bufs, a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut mean = 0.0;
                            for k in 0..n {
                                mean += x[(o * n + k) * inner + i];
                            }
                            mean *= inv;
                            let gu = g[o * inner + i] * 2.0 * inv;
                            for k in 0..n {
                                let idx = (o * n + k) * inner + i;
                                ga[idx] += gu * (x[idx] - mean);
                            }
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.numel();
                let gu = g[0] / n as f64;
                self.accumulate(bufs, a, |ga| {
                    for v in ga.iter_mut() {
                        *v += gu;
                    }
                });
            }
            Op::AddBias { a, bias } => {
                let n = self.nodes[bias].value.numel();
                let rows = self.nodes[a].value.numel() / n;
                self.accumulate(bufs, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                });
                self.accumulate(bufs, bias, |gb| {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::BroadcastTrailing { a, n } => {
                self.accumulate(bufs, a, |ga| {
                    for (fa, gv) in ga.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[fa * n + j];
                        }
                        *gv += acc;
                    }
                });
            }
            Op::BroadcastChannel { a, c } => {
                let ta = &self.nodes[a].value;
                let l = ta.last_dim();
                let lead = ta.numel() / l;
                self.accumulate(bufs, a, |ga| {
                    for ld in 0..lead {
                        for ch in 0..c {
                            let base = (ld * c + ch) * l;
                            for j in 0..l {
                                ga[ld * l + j] += g[base + j];
                            }
                        }
                    }
                });
            }
            Op::SliceTrailing { a, start, len } => {
                let last = self.nodes[a].value.last_dim();
                let rows = self.nodes[a].value.numel() / last;
                self.accumulate(bufs, a, |ga| {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * last + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatTrailing { a, b } => {
                let la = self.nodes[a].value.last_dim();
                let lb = self.nodes[b].value.last_dim();
                let rows = self.nodes[a].value.numel() / la;
                let lt = la + lb;
                self.accumulate(bufs, a, |ga| {
                    for r in 0..rows {
                        for j in 0..la {
                            ga[r * la + j] += g[r * lt + j];
                        }
                    }
                });
                self.accumulate(bufs, b, |gb| {
                    for r in 0..rows {
                        for j in 0..lb {
                            gb[r * lb + j] += g[r * lt + la + j];
                        }
                    }
                });
            }
            Op::TransposeTrailing(a) => {
                let out_shape = value.shape();
                let r = out_shape.len();
                let (rows, cols) = (out_shape[r - 2], out_shape[r - 1]);
                let lead = value.numel() / (rows * cols);
                self.accumulate(bufs, a, |ga| {
                    for ld in 0..lead {
                        let goff = ld * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                // output (i, j) came from input (j, i)
                                ga[goff + j * rows + i] += g[goff + i * cols + j];
                            }
                        }
                    }
                });
            }
            Op::FlipTrailing(a) => {
                let last = self.nodes[a].value.last_dim();
                let rows = self.nodes[a].value.numel() / last;
                self.accumulate(bufs, a, |ga| {
                    for r in 0..rows {
                        for k in 0..last {
                            ga[r * last + (last - k) % last] += g[r * last + k];
                        }
                    }
                });
            }
            Op::MovingAvgTrailing { a, kernel } => {
                let last = self.nodes[a].value.last_dim();
                let rows = self.nodes[a].value.numel() / last;
                let half = (kernel / 2) as isize;
                let inv = 1.0 / kernel as f64;
                self.accumulate(bufs, a, |ga| {
                    for r in 0..rows {
                        for i in 0..last {
                            let gu = g[r * last + i] * inv;
                            for t in -half..=half {
                                let j = (i as isize + t).clamp(0, last as isize - 1) as usize;
                                ga[r * last + j] += gu;
                            }
                        }
                    }
                });
            }
            Op::Dft(a) => {
                // adjoint: real part of the unnormalized inverse transform of
                // the packed upstream gradient
                let l = self.nodes[a].value.last_dim();
                let rows = self.nodes[a].value.numel() / l;
                let mut gr = vec![0.0; rows * l];
                let mut gi = vec![0.0; rows * l];
                for r in 0..rows {
                    gr[r * l..(r + 1) * l].copy_from_slice(&g[r * 2 * l..r * 2 * l + l]);
                    gi[r * l..(r + 1) * l].copy_from_slice(&g[r * 2 * l + l..(r + 1) * 2 * l]);
                }
                let (re, _im) = fft::dft_complex_rows(&gr, &gi, rows, l, true);
                self.accumulate(bufs, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += re[i];
                    }
                });
            }
            Op::IdftReal { a, .. } => {
                // adjoint: forward transform of the upstream gradient, 1/L
                let last = self.nodes[a].value.last_dim();
                let l = last / 2;
                let rows = self.nodes[a].value.numel() / last;
                let (re, im) = fft::dft_real_rows(g, rows, l);
                let inv = 1.0 / l as f64;
                self.accumulate(bufs, a, |ga| {
                    for r in 0..rows {
                        for k in 0..l {
                            ga[r * last + k] += re[r * l + k] * inv;
                            ga[r * last + l + k] += im[r * l + k] * inv;
                        }
                    }
                });
            }
        }
    }
}
