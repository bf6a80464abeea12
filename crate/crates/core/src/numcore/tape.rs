//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! bookkeeping to push gradients back to its inputs. Nodes are created in
//! topological order, so [`Tape::backward`] is a single reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::{Error, Result};

/// Probabilities are clamped to this floor before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        clamped: Vec<bool>,
    },
    BinaryCrossEntropyWithLogits {
        logits: Var,
        labels: Vec<u8>,
        clamped: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (OH·OW)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    geom: ConvGeometry,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let plane = out_h * out_w;
    let ConvGeometry { stride, padding } = geom;
    for c in 0..channels {
        let src = &image[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * width..(iy as usize + 1) * width];
                    if stride == 1 && padding == 0 {
                        line.copy_from_slice(&src_row[kj..kj + out_w]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            *v = if ix < 0 || ix >= width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    geom: ConvGeometry,
    out_h: usize,
    out_w: usize,
    image: &mut [T],
) {
    let plane = out_h * out_w;
    let ConvGeometry { stride, padding } = geom;
    for c in 0..channels {
        let dst = &mut image[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                    let line = &src[oy * out_w..(oy + 1) * out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < width {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It receives gradients iff `tensor.requires_grad()`.
    /// The tensor's own accumulator is not touched; read results via
    /// [`Tape::grad`].
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let value = Tensor::from_slice(tensor.shape(), tensor.data()).expect("shape already validated");
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value.data()[0]
    }

    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].grad.as_deref()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Clears leaf gradients so the next [`Tape::backward`] starts from zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::dimension(
                "conv2d",
                format!("input N×{}×H×W with weight O×C×k×k", ws.get(1).copied().unwrap_or(0)),
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_channels, kernel) = (ws[0], ws[2]);
        let (Some(out_h), Some(out_w)) = (
            output_extent(height, kernel, geom.stride, geom.padding),
            output_extent(width, kernel, geom.stride, geom.padding),
        ) else {
            return Err(Error::dimension(
                "conv2d",
                format!("spatial extent ≥ kernel {kernel} (padding {})", geom.padding),
                format!("input {xs:?}"),
            ));
        };
        if let Some(b) = bias {
            if self.value(b).numel() != out_channels {
                return Err(Error::dimension(
                    "conv2d",
                    format!("bias of {out_channels}"),
                    format!("{:?}", self.value(b).shape()),
                ));
            }
        }
        let patch = channels * kernel * kernel;
        let plane = out_h * out_w;
        let mut out = vec![T::zero(); batch * out_channels * plane];
        let mut cols = vec![T::zero(); patch * plane];
        let in_plane = channels * height * width;
        for n in 0..batch {
            im2col(
                &x.data()[n * in_plane..(n + 1) * in_plane],
                channels,
                height,
                width,
                kernel,
                geom,
                out_h,
                out_w,
                &mut cols,
            );
            let dst = &mut out[n * out_channels * plane..(n + 1) * out_channels * plane];
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv[o]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                out_channels,
                patch,
                plane,
                T::one(),
                w.data(),
                (patch, 1),
                &cols,
                (plane, 1),
                beta,
                dst,
                (plane, 1),
            );
        }
        let value = Tensor::new(&[batch, out_channels, out_h, out_w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::dimension("maxpool2d", "4-D N×C×H×W input", format!("{xs:?}")));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(out_h), Some(out_w)) = (
            output_extent(height, kernel, stride, 0),
            output_extent(width, kernel, stride, 0),
        ) else {
            return Err(Error::dimension(
                "maxpool2d",
                format!("spatial extent ≥ kernel {kernel}"),
                format!("{xs:?}"),
            ));
        };
        let planes = batch * channels;
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        let mut argmax = Vec::with_capacity(planes * out_h * out_w);
        let data = x.data();
        for p in 0..planes {
            let base = p * height * width;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = base + oy * stride * width + ox * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (oy * stride + ki) * width + ox * stride + kj;
                            // first maximum wins on ties
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[batch, channels, out_h, out_w], out)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, tracked))
    }

    /// `y = x Wᵀ + b` with `x: N×in`, `W: out×in`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dimension(
                "fully_connected",
                format!("2-D input N×{}", ws.get(1).copied().unwrap_or(0)),
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        let (rows, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != fan_out {
                return Err(Error::dimension(
                    "fully_connected",
                    format!("bias of {fan_out}"),
                    format!("{:?}", self.value(b).shape()),
                ));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            x.data(),
            (fan_in, 1),
            w.data(),
            (1, fan_in),
            T::one(),
            &mut out,
            (fan_out, 1),
        );
        let value = Tensor::new(&[rows, fan_out], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(value, Op::Linear { input, weight, bias }, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", "m×k times k×n", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            (k, 1),
            bv.data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let value = Tensor::new(&[m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    fn map(&mut self, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let tracked = self.tracked(&[input]);
        self.push(value, op, tracked)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.map(input, Op::Relu(input), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.map(input, Op::Tanh(input), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.map(input, Op::Sigmoid(input), sigmoid)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        self.map(input, Op::Scale(input, factor), move |v| v * f)
    }

    /// Row-wise softmax of a 2-D tensor, normalised in f64.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::dimension("softmax", "2-D R×C with C ≥ 1", format!("{xs:?}")));
        }
        let cols = xs[1];
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(cols) {
            out.extend(softmax_f64(row).into_iter().map(T::from_f64));
        }
        let value = Tensor::new(xs, out)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, Op::SoftmaxRows(input), tracked))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, Op::Reshape(input), tracked))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dimension(
                name,
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum_f64();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum(input), tracked)
    }

    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(Error::dimension("gather_rows", "2-D input", format!("{xs:?}")));
        }
        let cols = xs[1];
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= xs[0] {
                return Err(Error::dimension(
                    "gather_rows",
                    format!("row < {}", xs[0]),
                    format!("row {r}"),
                ));
            }
            out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(&[rows.len(), cols], out)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            value,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dimension(
                "concat_cols",
                "two R×_ matrices",
                format!("{sa:?} and {sb:?}"),
            ));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(&[rows, ca + cb], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), tracked))
    }

    /// `Σ_r −ln max(softmax(logits_r)[target_r], 1e-12)` over the rows of a
    /// 2-D logit matrix.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let xs = x.shape();
        if xs.len() != 2 || xs[0] != targets.len() {
            return Err(Error::dimension(
                "cross_entropy",
                format!("{}×C logits", targets.len()),
                format!("{xs:?}"),
            ));
        }
        let classes = xs[1];
        let mut probs = Vec::with_capacity(x.numel());
        let mut clamped = Vec::with_capacity(targets.len());
        let mut total = 0.0f64;
        for (row, &t) in x.data().chunks(classes).zip(targets) {
            if t >= classes {
                return Err(Error::dimension(
                    "cross_entropy",
                    format!("target < {classes}"),
                    format!("{t}"),
                ));
            }
            let (loss, is_clamped) = clamped_nll(row, t);
            total += loss;
            clamped.push(is_clamped);
            probs.extend(softmax_f64(row).into_iter().map(T::from_f64));
        }
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
                clamped,
            },
            tracked,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels, with
    /// the probability clamped to `[1e-12, 1]` inside the logarithm.
    pub fn bce_with_logits_mean(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let x = self.value(logits);
        if x.numel() != labels.len() || labels.is_empty() {
            return Err(Error::dimension(
                "bce",
                format!("{} logits", labels.len()),
                format!("{:?}", x.shape()),
            ));
        }
        let mut total = 0.0f64;
        let mut clamped = Vec::with_capacity(labels.len());
        for (&s, &y) in x.data().iter().zip(labels) {
            let (loss, is_clamped) = bce_from_logit(s.as_f64(), y);
            total += loss;
            clamped.push(is_clamped);
        }
        let mean = total / labels.len() as f64;
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(mean)),
            Op::BinaryCrossEntropyWithLogits {
                logits,
                labels: labels.to_vec(),
                clamped,
            },
            tracked,
        ))
    }

    fn accumulate(&mut self, var: Var, delta: Vec<T>) {
        let node = &mut self.nodes[var.0];
        if !node.tracked {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(delta) {
                    *dst += src;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Propagates d(loss)/d(node) to every tracked node reachable from `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let deltas = self.node_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (var, delta) in deltas {
                self.accumulate(var, delta);
            }
        }
        Ok(())
    }

    fn node_backward(&self, index: usize, grad: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[index];
        let out = &node.value;
        let mut deltas = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (xs, ws, os) = (x.shape(), w.shape(), out.shape());
                let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
                let (out_channels, kernel, out_h, out_w) = (ws[0], ws[2], os[2], os[3]);
                let patch = channels * kernel * kernel;
                let plane = out_h * out_w;
                let in_plane = channels * height * width;
                let want_x = self.is_tracked(*input);
                let want_w = self.is_tracked(*weight);
                let mut dx = if want_x { vec![T::zero(); x.numel()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); w.numel()] } else { Vec::new() };
                let mut cols = vec![T::zero(); patch * plane];
                for n in 0..batch {
                    let g = &grad[n * out_channels * plane..(n + 1) * out_channels * plane];
                    if want_w {
                        im2col(
                            &x.data()[n * in_plane..(n + 1) * in_plane],
                            channels,
                            height,
                            width,
                            kernel,
                            *geom,
                            out_h,
                            out_w,
                            &mut cols,
                        );
                        // dW += g · colsᵀ
                        T::gemm(
                            out_channels,
                            plane,
                            patch,
                            T::one(),
                            g,
                            (plane, 1),
                            &cols,
                            (1, plane),
                            T::one(),
                            &mut dw,
                            (patch, 1),
                        );
                    }
                    if want_x {
                        // dcols = Wᵀ · g
                        T::gemm(
                            patch,
                            out_channels,
                            plane,
                            T::one(),
                            w.data(),
                            (1, patch),
                            g,
                            (plane, 1),
                            T::zero(),
                            &mut cols,
                            (plane, 1),
                        );
                        col2im(
                            &cols,
                            channels,
                            height,
                            width,
                            kernel,
                            *geom,
                            out_h,
                            out_w,
                            &mut dx[n * in_plane..(n + 1) * in_plane],
                        );
                    }
                }
                if want_x {
                    deltas.push((*input, dx));
                }
                if want_w {
                    deltas.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.is_tracked(*b) {
                        let mut db = vec![0.0f64; out_channels];
                        for (i, chunk) in grad.chunks(plane).enumerate() {
                            db[i % out_channels] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        deltas.push((*b, db.into_iter().map(T::from_f64).collect()));
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &g) in argmax.iter().zip(grad) {
                    dx[src] += g;
                }
                deltas.push((*input, dx));
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (rows, fan_in, fan_out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if self.is_tracked(*input) {
                    let mut dx = vec![T::zero(); x.numel()];
                    T::gemm(
                        rows,
                        fan_out,
                        fan_in,
                        T::one(),
                        grad,
                        (fan_out, 1),
                        w.data(),
                        (fan_in, 1),
                        T::zero(),
                        &mut dx,
                        (fan_in, 1),
                    );
                    deltas.push((*input, dx));
                }
                if self.is_tracked(*weight) {
                    let mut dw = vec![T::zero(); w.numel()];
                    T::gemm(
                        fan_out,
                        rows,
                        fan_in,
                        T::one(),
                        grad,
                        (1, fan_out),
                        x.data(),
                        (fan_in, 1),
                        T::zero(),
                        &mut dw,
                        (fan_in, 1),
                    );
                    deltas.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.is_tracked(*b) {
                        let mut db = vec![0.0f64; fan_out];
                        for row in grad.chunks(fan_out) {
                            for (acc, g) in db.iter_mut().zip(row) {
                                *acc += g.as_f64();
                            }
                        }
                        deltas.push((*b, db.into_iter().map(T::from_f64).collect()));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.is_tracked(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        grad,
                        (n, 1),
                        bv.data(),
                        (1, n),
                        T::zero(),
                        &mut da,
                        (k, 1),
                    );
                    deltas.push((*a, da));
                }
                if self.is_tracked(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        (1, k),
                        grad,
                        (n, 1),
                        T::zero(),
                        &mut db,
                        (n, 1),
                    );
                    deltas.push((*b, db));
                }
            }
            Op::Relu(input) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                deltas.push((*input, dx));
            }
            Op::Tanh(input) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * (T::one() - y * y))
                    .collect();
                deltas.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                deltas.push((*input, dx));
            }
            Op::SoftmaxRows(input) => {
                let cols = out.shape()[1];
                let mut dx = Vec::with_capacity(out.numel());
                for (y, g) in out.data().chunks(cols).zip(grad.chunks(cols)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dx.extend(
                        y.iter()
                            .zip(g)
                            .map(|(&yi, &gi)| T::from_f64(yi.as_f64() * (gi.as_f64() - dot))),
                    );
                }
                deltas.push((*input, dx));
            }
            Op::Reshape(input) => deltas.push((*input, grad.to_vec())),
            Op::Add(a, b) => {
                deltas.push((*a, grad.to_vec()));
                deltas.push((*b, grad.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                deltas.push((*a, grad.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                deltas.push((*b, grad.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(input, factor) => {
                let f = T::from_f64(*factor);
                deltas.push((*input, grad.iter().map(|&g| g * f).collect()));
            }
            Op::Sum(input) => {
                deltas.push((*input, vec![grad[0]; self.value(*input).numel()]));
            }
            Op::GatherRows { input, rows } => {
                let x = self.value(*input);
                let cols = x.shape()[1];
                let mut dx = vec![T::zero(); x.numel()];
                for (g, &r) in grad.chunks(cols).zip(rows) {
                    for (dst, &v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *dst += v;
                    }
                }
                deltas.push((*input, dx));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                let mut da = Vec::with_capacity(self.value(*a).numel());
                let mut db = Vec::with_capacity(self.value(*b).numel());
                for row in grad.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                deltas.push((*a, da));
                deltas.push((*b, db));
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
                clamped,
            } => {
                let classes = self.value(*logits).shape()[1];
                let g = grad[0];
                let mut dx = Vec::with_capacity(probs.len());
                for ((p, &t), &c) in probs.chunks(classes).zip(targets).zip(clamped) {
                    for (j, &pj) in p.iter().enumerate() {
                        let d = if c {
                            T::zero()
                        } else if j == t {
                            pj - T::one()
                        } else {
                            pj
                        };
                        dx.push(d * g);
                    }
                }
                deltas.push((*logits, dx));
            }
            Op::BinaryCrossEntropyWithLogits {
                logits,
                labels,
                clamped,
            } => {
                let n = labels.len() as f64;
                let g = grad[0].as_f64();
                let dx = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(clamped)
                    .map(|((&s, &y), &c)| {
                        if c {
                            T::zero()
                        } else {
                            let p = sigmoid(s.as_f64());
                            T::from_f64(g * (p - f64::from(y)) / n)
                        }
                    })
                    .collect();
                deltas.push((*logits, dx));
            }
        }
        deltas
    }
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax in f64.
pub fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| num_traits::Float::exp(v.as_f64() - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−ln max(softmax(row)[target], 1e-12)`, with a flag set when the clamp is
/// active.
fn clamped_nll<T: Real>(row: &[T], target: usize) -> (f64, bool) {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + num_traits::Float::ln(
            row.iter()
                .map(|v| num_traits::Float::exp(v.as_f64() - max))
                .sum::<f64>(),
        );
    let nll = lse - row[target].as_f64();
    let cap = -num_traits::Float::ln(LOG_CLAMP);
    if nll > cap {
        (cap, true)
    } else {
        (nll, false)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` for label `y`, computed via
/// softplus and clamped like the probability form.
fn bce_from_logit(logit: f64, label: u8) -> (f64, bool) {
    // −ln σ(s) = softplus(−s); −ln(1 − σ(s)) = softplus(s)
    let z = if label == 1 { -logit } else { logit };
    let nll = if z > 0.0 {
        z + num_traits::Float::ln_1p(num_traits::Float::exp(-z))
    } else {
        num_traits::Float::ln_1p(num_traits::Float::exp(z))
    };
    let cap = -num_traits::Float::ln(LOG_CLAMP);
    if nll > cap {
        (cap, true)
    } else {
        (nll, false)
    }
}
