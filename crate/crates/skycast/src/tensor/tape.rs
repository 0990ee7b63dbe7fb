//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding the output value plus enough
//! saved state to replay its backward rule. [`Tape::backward`] walks the
//! nodes in reverse recorded order exactly once and accumulates gradients
//! additively into shared inputs, which makes fan-out correct by
//! construction.

use super::kernels::{self, Trans};
use super::{Element, Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    /// y = x ⋅ wᵀ (+ bias); w stored as [out, in].
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    /// Per-row Euclidean norm of a [rows, ...] tensor, output [rows].
    RowL2 {
        x: Var,
    },
    /// Euclidean norm of the whole tensor, output scalar.
    L2Norm(Var),
}

/// Records operations for one forward pass and replays them backward.
pub struct Tape<T: Element> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Inserts an input tensor. Gradients are only tracked through nodes
    /// whose ancestry contains a leaf with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inserts a non-differentiable input (targets, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any was
    /// accumulated. Shaped like the value of `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.values[v.0].shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape")
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise ────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x + y);
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), self.req(a) || self.req(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x - y);
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), self.req(a) || self.req(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x * y);
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), self.req(a) || self.req(b)))
    }

    /// Multiplication by a compile-time constant (not differentiated
    /// through the constant).
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.values[a.0].map(|v| v * c);
        self.push(t, Op::Scale(a, c), self.req(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.values[a.0].map(|v| v + c);
        self.push(t, Op::AddScalar(a), self.req(a))
    }

    /// Broadcasts a per-channel bias over axis 1 of a rank ≥ 2 tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[bias.0].shape().to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.values[bias.0].data().to_vec();
        let mut data = self.values[x.0].data().to_vec();
        for sample in data.chunks_mut(channels * inner) {
            for (c, chunk) in sample.chunks_mut(inner).enumerate() {
                for v in chunk.iter_mut() {
                    *v = *v + b[c];
                }
            }
        }
        let t = Tensor::new(xs, data)?;
        Ok(self.push(t, Op::AddChannelBias { x, bias }, self.req(x) || self.req(bias)))
    }

    // ── matrix products ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.values[a.0].shape(), self.values[b.0].shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            self.values[a.0].data(),
            (m, k),
            Trans::No,
            self.values[b.0].data(),
            (k, n),
            Trans::No,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), self.req(a) || self.req(b)))
    }

    /// Dense layer product y = x ⋅ wᵀ (+ bias) with x [N, in], w [out, in].
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.values[x.0].shape(), self.values[w.0].shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, input, out_dim) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            let bs = self.values[b.0].shape();
            if bs != [out_dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![out_dim],
                    rhs: bs.to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); n * out_dim];
        kernels::gemm(
            self.values[x.0].data(),
            (n, input),
            Trans::No,
            self.values[w.0].data(),
            (out_dim, input),
            Trans::Yes,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bd = self.values[b.0].data();
            for row in out.chunks_mut(out_dim) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v = *v + bv;
                }
            }
        }
        let t = Tensor::new(vec![n, out_dim], out)?;
        let req = self.req(x) || self.req(w) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(t, Op::Linear { x, w, bias }, req))
    }

    // ── convolution and spatial ops ────────────────────────────────

    /// 2-D convolution of x [N,C,H,W] with w [Cout,Cin,kh,kw], zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = kernels::conv_out_size(h, kh, stride, pad);
        let wo = kernels::conv_out_size(wdt, kw, stride, pad);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "conv2d",
                    shape: xs,
                    reason: format!("kernel {kh}x{kw} with pad {pad} exceeds padded input"),
                })
            }
        };
        let ck = c * kh * kw;
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut cols = vec![T::zero(); ck * ho * wo];
        let xd = self.values[x.0].data();
        let wd = self.values[w.0].data();
        for i in 0..n {
            kernels::im2col(
                &xd[i * c * h * wdt..(i + 1) * c * h * wdt],
                c,
                h,
                wdt,
                kh,
                kw,
                stride,
                pad,
                &mut cols,
            );
            kernels::gemm(
                wd,
                (cout, ck),
                Trans::No,
                &cols,
                (ck, ho * wo),
                Trans::No,
                &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo],
                false,
            );
        }
        let t = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, self.req(x) || self.req(w)))
    }

    /// 2×2 stride-2 max pooling. Ties route to the lowest flat index.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "maxpool2",
                shape: xs,
                reason: "expects [N,C,H,W] with even H and W".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out, argmax) = kernels::maxpool2(self.values[x.0].data(), n, c, h, w);
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, self.req(x)))
    }

    /// 2× nearest-neighbor upsampling of [N,C,H,W].
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "upsample2",
                shape: xs,
                reason: "expects [N,C,H,W]".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let out = kernels::upsample2(self.values[x.0].data(), n, c, h, w);
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2(x), self.req(x)))
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.values[parts[0].0].shape().to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = self.values[p.0].shape();
            if s.len() != rank
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for p in parts {
            let s = self.values[p.0].shape();
            let len = s[axis];
            let src = self.values[p.0].data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * len * inner;
                data[dst_start..dst_start + len * inner]
                    .copy_from_slice(&src[src_start..src_start + len * inner]);
            }
            offset += len;
        }
        let req = parts.iter().any(|p| self.req(*p));
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: xs,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.values[x.0].data();
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * xs[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let mut out_shape = xs;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, self.req(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), self.req(x)))
    }

    // ── activations ────────────────────────────────────────────────

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(|v| v.tanh());
        self.push(t, Op::Tanh(x), self.req(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let t = self.values[x.0].map(|v| one / (one + (-v).exp()));
        self.push(t, Op::Sigmoid(x), self.req(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x), self.req(x))
    }

    // ── batch normalization ────────────────────────────────────────

    /// Training-mode batch norm over axis 1 of a rank ≥ 2 tensor.
    ///
    /// Normalizes with the batch statistics (biased variance) and returns
    /// them so the caller can maintain running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (mean, var) = self.batch_stats(x)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.batch_norm_output(x, gamma, beta, &mean, &inv_std)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let var_out = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            req,
        );
        Ok((var_out, mean, var))
    }

    /// Eval-mode batch norm: a pure per-channel affine map using the
    /// provided running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let channels = self.channel_count(x, "batch_norm")?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: vec![channels],
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let y = self.batch_norm_output(x, gamma, beta, running_mean, &inv_std)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            req,
        ))
    }

    fn channel_count(&self, x: Var, op: &'static str) -> Result<usize> {
        let xs = self.values[x.0].shape();
        if xs.len() < 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: xs.to_vec(),
                reason: "expects rank >= 2 with channels on axis 1".into(),
            });
        }
        Ok(xs[1])
    }

    /// Per-channel mean and biased variance over all non-channel axes.
    fn batch_stats(&self, x: Var) -> Result<(Vec<T>, Vec<T>)> {
        let channels = self.channel_count(x, "batch_norm")?;
        let xs = self.values[x.0].shape();
        let inner: usize = xs[2..].iter().product();
        let batch = xs[0];
        let m = T::from_usize(batch * inner).unwrap();
        let xd = self.values[x.0].data();
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for i in 0..batch {
            for c in 0..channels {
                let chunk = &xd[(i * channels + c) * inner..(i * channels + c + 1) * inner];
                let mut s = T::zero();
                for &v in chunk {
                    s = s + v;
                }
                mean[c] = mean[c] + s;
            }
        }
        for v in mean.iter_mut() {
            *v = *v / m;
        }
        for i in 0..batch {
            for c in 0..channels {
                let chunk = &xd[(i * channels + c) * inner..(i * channels + c + 1) * inner];
                let mut s = T::zero();
                for &v in chunk {
                    let d = v - mean[c];
                    s = s + d * d;
                }
                var[c] = var[c] + s;
            }
        }
        for v in var.iter_mut() {
            *v = *v / m;
        }
        Ok((mean, var))
    }

    fn batch_norm_output(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> Result<Tensor<T>> {
        let channels = self.channel_count(x, "batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.values[v.0].shape();
            if s != [channels] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    lhs: vec![channels],
                    rhs: s.to_vec(),
                });
            }
        }
        let xs = self.values[x.0].shape();
        let inner: usize = xs[2..].iter().product();
        let batch = xs[0];
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let xd = self.values[x.0].data();
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..batch {
            for c in 0..channels {
                let base = (i * channels + c) * inner;
                let (mu, s, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                for j in 0..inner {
                    out[base + j] = gc * (xd[base + j] - mu) * s + bc;
                }
            }
        }
        Tensor::new(xs.to_vec(), out)
    }

    // ── reductions ────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.values[x.0].data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), self.req(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.values[x.0].numel()).unwrap();
        let mut s = T::zero();
        for &v in self.values[x.0].data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s / n), Op::Mean(x), self.req(x))
    }

    /// Per-row Euclidean norm of a rank ≥ 2 tensor: [rows, ...] → [rows].
    ///
    /// The gradient at an exactly-zero row is defined as zero.
    pub fn row_l2(&mut self, x: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "row_l2",
                shape: xs,
                reason: "expects rank >= 2".into(),
            });
        }
        let rows = xs[0];
        let inner: usize = xs[1..].iter().product();
        let xd = self.values[x.0].data();
        let mut norms = vec![T::zero(); rows];
        for (i, norm) in norms.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in &xd[i * inner..(i + 1) * inner] {
                s = s + v * v;
            }
            *norm = s.sqrt();
        }
        let t = Tensor::new(vec![rows], norms)?;
        Ok(self.push(t, Op::RowL2 { x }, self.req(x)))
    }

    /// Euclidean norm of the whole tensor. Gradient at zero is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.values[x.0].data() {
            s = s + v * v;
        }
        self.push(Tensor::scalar(s.sqrt()), Op::L2Norm(x), self.req(x))
    }

    // ── backward ──────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) for every node that requires a
    /// gradient. `loss` must be scalar; a second call without re-running
    /// the forward pass is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        if !self.requires[loss.0] {
            return Err(TensorError::DetachedGraph);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue; // keep leaf gradients readable after backward
            }
            let g = self.grads[i].take().expect("checked above");
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn acc(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
        grads[idx].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn propagate(&mut self, node: usize, g: &[T]) {
        let numel = |values: &[Tensor<T>], v: Var| values[v.0].numel();
        // Fields are split so values can be read while grads are written.
        let Tape {
            values,
            ops,
            requires,
            grads,
            ..
        } = self;
        let req = |v: Var| requires[v.0];

        match &ops[node] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if req(*v) {
                        let dst = Self::acc(grads, v.0, numel(values, *v));
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if req(*a) {
                    let dst = Self::acc(grads, a.0, numel(values, *a));
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if req(*b) {
                    let dst = Self::acc(grads, b.0, numel(values, *b));
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if req(*a) {
                    let bd = values[b.0].data();
                    let dst = Self::acc(grads, a.0, numel(values, *a));
                    for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(bd) {
                        *d = *d + gv * bv;
                    }
                }
                if req(*b) {
                    let ad = values[a.0].data();
                    let dst = Self::acc(grads, b.0, numel(values, *b));
                    for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(ad) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if req(*a) {
                    let c = *c;
                    let dst = Self::acc(grads, a.0, numel(values, *a));
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if req(*a) {
                    let dst = Self::acc(grads, a.0, numel(values, *a));
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::AddChannelBias { x, bias } => {
                let xs = values[x.0].shape();
                let channels = xs[1];
                let inner: usize = xs[2..].iter().product();
                if req(*x) {
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if req(*bias) {
                    let dst = Self::acc(grads, bias.0, channels);
                    for sample in g.chunks(channels * inner) {
                        for (c, chunk) in sample.chunks(inner).enumerate() {
                            let mut s = T::zero();
                            for &gv in chunk {
                                s = s + gv;
                            }
                            dst[c] = dst[c] + s;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                if req(*a) {
                    let bd = values[b.0].data().to_vec();
                    let dst = Self::acc(grads, a.0, m * k);
                    kernels::gemm(g, (m, n), Trans::No, &bd, (k, n), Trans::Yes, dst, true);
                }
                if req(*b) {
                    let ad = values[a.0].data().to_vec();
                    let dst = Self::acc(grads, b.0, k * n);
                    kernels::gemm(&ad, (m, k), Trans::Yes, g, (m, n), Trans::No, dst, true);
                }
            }
            Op::Linear { x, w, bias } => {
                let (n, input) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                let out_dim = values[w.0].shape()[0];
                if req(*x) {
                    let wd = values[w.0].data().to_vec();
                    let dst = Self::acc(grads, x.0, n * input);
                    kernels::gemm(
                        g,
                        (n, out_dim),
                        Trans::No,
                        &wd,
                        (out_dim, input),
                        Trans::No,
                        dst,
                        true,
                    );
                }
                if req(*w) {
                    let xd = values[x.0].data().to_vec();
                    let dst = Self::acc(grads, w.0, out_dim * input);
                    kernels::gemm(
                        g,
                        (n, out_dim),
                        Trans::Yes,
                        &xd,
                        (n, input),
                        Trans::No,
                        dst,
                        true,
                    );
                }
                if let Some(b) = bias {
                    if req(*b) {
                        let dst = Self::acc(grads, b.0, out_dim);
                        for row in g.chunks(out_dim) {
                            for (d, &gv) in dst.iter_mut().zip(row) {
                                *d = *d + gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = values[x.0].shape().to_vec();
                let ws = values[w.0].shape().to_vec();
                let (n, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = kernels::conv_out_size(h, kh, stride, pad).unwrap();
                let wo = kernels::conv_out_size(wdt, kw, stride, pad).unwrap();
                let ck = c * kh * kw;
                let xd = values[x.0].data().to_vec();
                let wd = values[w.0].data().to_vec();
                let mut cols = vec![T::zero(); ck * ho * wo];
                let mut dcols = vec![T::zero(); ck * ho * wo];
                let need_w = req(*w);
                let need_x = req(*x);
                if need_w {
                    Self::acc(grads, w.0, cout * ck);
                }
                if need_x {
                    Self::acc(grads, x.0, n * c * h * wdt);
                }
                for i in 0..n {
                    let gslice = &g[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                    if need_w {
                        kernels::im2col(
                            &xd[i * c * h * wdt..(i + 1) * c * h * wdt],
                            c,
                            h,
                            wdt,
                            kh,
                            kw,
                            stride,
                            pad,
                            &mut cols,
                        );
                        let dw = grads[w.0].as_mut().unwrap();
                        kernels::gemm(
                            gslice,
                            (cout, ho * wo),
                            Trans::No,
                            &cols,
                            (ck, ho * wo),
                            Trans::Yes,
                            dw,
                            true,
                        );
                    }
                    if need_x {
                        kernels::gemm(
                            &wd,
                            (cout, ck),
                            Trans::Yes,
                            gslice,
                            (cout, ho * wo),
                            Trans::No,
                            &mut dcols,
                            false,
                        );
                        let dx = grads[x.0].as_mut().unwrap();
                        kernels::col2im_add(
                            &dcols,
                            c,
                            h,
                            wdt,
                            kh,
                            kw,
                            stride,
                            pad,
                            &mut dx[i * c * h * wdt..(i + 1) * c * h * wdt],
                        );
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if req(*x) {
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dst[a as usize] = dst[a as usize] + gv;
                    }
                }
            }
            Op::Upsample2(x) => {
                if req(*x) {
                    let xs = values[x.0].shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dx = kernels::upsample2_backward(g, n, c, h, w);
                    let dst = Self::acc(grads, x.0, dx.len());
                    for (d, v) in dst.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let parts = parts.clone();
                let total_axis: usize = parts.iter().map(|p| values[p.0].shape()[axis]).sum();
                let first = values[parts[0].0].shape();
                let outer: usize = first[..axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let mut offset = 0usize;
                for p in &parts {
                    let len = values[p.0].shape()[axis];
                    if req(*p) {
                        let dst = Self::acc(grads, p.0, numel(values, *p));
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let dst_start = o * len * inner;
                            for j in 0..len * inner {
                                dst[dst_start + j] = dst[dst_start + j] + g[src_start + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if req(*x) {
                    let (axis, start) = (*axis, *start);
                    let xs = values[x.0].shape().to_vec();
                    let outer: usize = xs[..axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = g.len() / (outer * inner);
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for o in 0..outer {
                        let dst_start = (o * xs[axis] + start) * inner;
                        let src_start = o * len * inner;
                        for j in 0..len * inner {
                            dst[dst_start + j] = dst[dst_start + j] + g[src_start + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if req(*x) {
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Tanh(x) => {
                if req(*x) {
                    let y = values[node].data();
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if req(*x) {
                    let y = values[node].data();
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Relu(x) => {
                if req(*x) {
                    let y = values[node].data();
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = values[x.0].shape();
                let (batch, channels) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = T::from_usize(batch * inner).unwrap();
                let xd = values[x.0].data();
                let gd = values[gamma.0].data();
                // Per-channel sums of g and g*xhat.
                let mut t1 = vec![T::zero(); channels];
                let mut t2 = vec![T::zero(); channels];
                for i in 0..batch {
                    for c in 0..channels {
                        let base = (i * channels + c) * inner;
                        let (mu, s) = (mean[c], inv_std[c]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..inner {
                            let gv = g[base + j];
                            s1 = s1 + gv;
                            s2 = s2 + gv * (xd[base + j] - mu) * s;
                        }
                        t1[c] = t1[c] + s1;
                        t2[c] = t2[c] + s2;
                    }
                }
                if req(*beta) {
                    let dst = Self::acc(grads, beta.0, channels);
                    for (d, &v) in dst.iter_mut().zip(&t1) {
                        *d = *d + v;
                    }
                }
                if req(*gamma) {
                    let dst = Self::acc(grads, gamma.0, channels);
                    for (d, &v) in dst.iter_mut().zip(&t2) {
                        *d = *d + v;
                    }
                }
                if req(*x) {
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let gd = gd.to_vec();
                    let xd_copy = xd.to_vec();
                    let dst = Self::acc(grads, x.0, batch * channels * inner);
                    for i in 0..batch {
                        for c in 0..channels {
                            let base = (i * channels + c) * inner;
                            let (mu, s, gc) = (mean[c], inv_std[c], gd[c]);
                            let (m1, m2) = (t1[c] / m, t2[c] / m);
                            for j in 0..inner {
                                let xhat = (xd_copy[base + j] - mu) * s;
                                let v = gc * s * (g[base + j] - m1 - xhat * m2);
                                dst[base + j] = dst[base + j] + v;
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = values[x.0].shape();
                let (batch, channels) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let xd = values[x.0].data();
                let gd = values[gamma.0].data();
                if req(*beta) {
                    let dst = Self::acc(grads, beta.0, channels);
                    for i in 0..batch {
                        for c in 0..channels {
                            let base = (i * channels + c) * inner;
                            for j in 0..inner {
                                dst[c] = dst[c] + g[base + j];
                            }
                        }
                    }
                }
                if req(*gamma) {
                    let mut t2 = vec![T::zero(); channels];
                    for i in 0..batch {
                        for c in 0..channels {
                            let base = (i * channels + c) * inner;
                            for j in 0..inner {
                                t2[c] = t2[c] + g[base + j] * (xd[base + j] - mean[c]) * inv_std[c];
                            }
                        }
                    }
                    let dst = Self::acc(grads, gamma.0, channels);
                    for (d, &v) in dst.iter_mut().zip(&t2) {
                        *d = *d + v;
                    }
                }
                if req(*x) {
                    let inv_std = inv_std.clone();
                    let gd = gd.to_vec();
                    let dst = Self::acc(grads, x.0, batch * channels * inner);
                    for i in 0..batch {
                        for c in 0..channels {
                            let base = (i * channels + c) * inner;
                            let k = gd[c] * inv_std[c];
                            for j in 0..inner {
                                dst[base + j] = dst[base + j] + g[base + j] * k;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if req(*x) {
                    let gv = g[0];
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Mean(x) => {
                if req(*x) {
                    let n = T::from_usize(numel(values, *x)).unwrap();
                    let gv = g[0] / n;
                    let dst = Self::acc(grads, x.0, numel(values, *x));
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::RowL2 { x } => {
                if req(*x) {
                    let norms = values[node].data().to_vec();
                    let xd = values[x.0].data().to_vec();
                    let rows = norms.len();
                    let inner = xd.len() / rows;
                    let dst = Self::acc(grads, x.0, xd.len());
                    for i in 0..rows {
                        if norms[i] == T::zero() {
                            continue;
                        }
                        let k = g[i] / norms[i];
                        for j in 0..inner {
                            dst[i * inner + j] = dst[i * inner + j] + k * xd[i * inner + j];
                        }
                    }
                }
            }
            Op::L2Norm(x) => {
                if req(*x) {
                    let norm = values[node].item();
                    if norm != T::zero() {
                        let k = g[0] / norm;
                        let xd = values[x.0].data().to_vec();
                        let dst = Self::acc(grads, x.0, xd.len());
                        for (d, &xv) in dst.iter_mut().zip(&xd) {
                            *d = *d + k * xv;
                        }
                    }
                }
            }
        }
    }
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::eye(3));
        let a = tape.constant(t64(&[3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(t).item(), 0.0);
    }

    #[test]
    fn conv2d_ones_matches_hand_unrolled() {
        // 4x4 ones, 3x3 ones kernel, stride 1, pad 1: centers 9, corners 4.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        assert_eq!(out.data()[0], 4.0); // corner
        assert_eq!(out.data()[5], 9.0); // center
        assert_eq!(out.data()[3], 4.0);
        assert_eq!(out.data()[6], 9.0);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_dot_at_zero_weight() {
        // loss = sigmoid(w . x) at w = 0: grad w = 0.25 * x.
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![1, 3]), true);
        let x = tape.constant(t64(&[3, 1], &[1.0, 2.0, 3.0]));
        let dot = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(dot);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        assert_eq!(g.data(), &[0.25, 0.5, 0.75]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(f(x) + g(x)) equals the sum of separate gradients.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.5, -2.0]), true);
        let f = tape.mul(x, x).unwrap();
        let g = tape.scale(x, 3.0);
        let both = tape.add(f, g).unwrap();
        let loss = tape.sum(both);
        tape.backward(loss).unwrap();
        let grad = tape.grad(x).unwrap();
        assert_eq!(grad.data(), &[2.0 * 1.5 + 3.0, 2.0 * -2.0 + 3.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::DoubleBackward)
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_graph_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let loss = tape.sum(x);
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::DetachedGraph)
        ));
    }

    #[test]
    fn maxpool_tie_routes_to_first_flat_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]), true);
        let y = tape.maxpool2(x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_norm_gradient_is_unit_direction() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[3.0, 4.0]), true);
        let n = tape.l2_norm(x);
        assert_eq!(tape.value(n).item(), 5.0);
        tape.backward(n).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
        assert!((g.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_roundtrip_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t64(&[2, 1], &[5.0, 6.0]), true);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let right = tape.slice(cat, 1, 2, 1).unwrap();
        let loss = tape.sum(right);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]), true);
        let gamma = tape.constant(Tensor::full(vec![1], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![1]));
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-12).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 1.25).abs() < 1e-12);
        let out = tape.value(y).data().to_vec();
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        let v: f64 = out.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-5);
    }
}
