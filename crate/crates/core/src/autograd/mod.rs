//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value lives in an arena owned by [`Graph`]; a [`Var`] is an index into
//! it. An operation is recorded (kept with its backward rule) only when at least
//! one input requires a gradient, otherwise its output is stored as a constant.
//! Because nodes are appended as they are created, arena order is a valid
//! topological order and `backward` simply walks it in reverse.

mod gradcheck;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, InputReport};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvSpec, PoolDims, PoolKind};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ChannelScale(Var, Var),
    SpatialMask(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Train mode normalizes with batch statistics, which couples samples.
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LnClamped {
        x: Var,
        floor: T,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        dims: PoolDims,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::ChannelScale(..) => "channel_scale",
            Op::SpatialMask(..) => "spatial_mask",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LnClamped { .. } => "ln",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::ChannelMean(..) => "channel_mean",
            Op::ChannelMax { .. } => "channel_max",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dropout { .. } => "dropout",
        }
    }
}

/// Names accepted by [`Graph::corrupt_backward`].
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "add_bias",
    "channel_scale",
    "spatial_mask",
    "conv2d",
    "batchnorm",
    "relu",
    "sigmoid",
    "softmax",
    "ln",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "channel_mean",
    "channel_max",
    "concat",
    "narrow",
    "reshape",
    "sum",
    "mean",
    "dropout",
];

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    corrupt: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.data().iter().position(|v| v.is_nan()) {
        Some(index) => Err(Error::NonFinite { op, input: 0, index }),
        None => Ok(()),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(op, format!("expected an NCHW tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            corrupt: None,
        }
    }

    /// Test hook: scales the gradient produced by every op named `op` by 1.5,
    /// so gradient checks have a known-bad rule to catch.
    pub fn corrupt_backward(&mut self, op: &str) -> Result<()> {
        let name = OP_NAMES
            .iter()
            .find(|&&n| n == op)
            .ok_or_else(|| Error::invalid("corrupt_backward", format!("unknown op `{op}`")))?;
        self.corrupt = Some(name);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of operations recorded with a backward rule.
    pub fn tape_len(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, &[a], Op::AddScalar(a))
    }

    /// `[n, d] x [d, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (n, d, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        gemm(n, d, m, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), &[a, b], Op::MatMul(a, b)))
    }

    /// Adds `b[c]` along axis 1 of `x` (`[n, c]` or `[n, c, h, w]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let (outer, c, inner) = split_axis(&sx, 1);
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv[ch];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), &[x, b], Op::AddBias(x, b)))
    }

    /// `x[n, c, h, w] * s[n, c]`, broadcasting the per-channel scale over space.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        let [n, c, h, w] = nchw("channel_scale", &sx)?;
        if ss != [n, c] {
            return Err(Error::shape("channel_scale", &sx, &ss));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let k = sv[i];
            for v in plane {
                *v *= k;
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), &[x, s], Op::ChannelScale(x, s)))
    }

    /// `x[n, c, h, w] * m[n, 1, h, w]`, broadcasting the spatial mask over channels.
    pub fn spatial_mask(&mut self, x: Var, m: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sm = self.shape(m).to_vec();
        let [n, c, h, w] = nchw("spatial_mask", &sx)?;
        if sm != [n, 1, h, w] {
            return Err(Error::shape("spatial_mask", &sx, &sm));
        }
        let hw = h * w;
        let mv = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let mask = &mv[(i / c) * hw..(i / c + 1) * hw];
            for (v, &k) in plane.iter_mut().zip(mask) {
                *v *= k;
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), &[x, m], Op::SpatialMask(x, m)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let sx = self.shape(x).to_vec();
        let [n, c, h, wd] = nchw("conv2d", &sx)?;
        if c != spec.in_channels {
            return Err(Error::shape("conv2d", &sx, &[spec.in_channels]));
        }
        let ws = spec.weight_shape();
        if self.shape(w) != ws {
            return Err(Error::shape("conv2d", self.shape(w), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape("conv2d", self.shape(b), &[spec.out_channels]));
            }
        }
        let (oh, ow) = spec.output_hw(h, wd)?;
        let dims = ConvDims { n, h, w: wd, oh, ow };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            spec,
            &dims,
        );
        let value = Tensor::from_parts(vec![n, spec.out_channels, oh, ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                spec: *spec,
                dims,
            },
        ))
    }

    /// Batch normalization over axis 1 using batch statistics.
    ///
    /// Returns the output together with the batch mean and biased variance so
    /// the caller can update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::invalid("batchnorm", format!("expected [n, c, ..], got {sx:?}")));
        }
        if sx[0] < 2 {
            return Err(Error::invalid("batchnorm", "train mode needs a batch of at least 2"));
        }
        let (n, c, inner) = split_axis(&sx, 1);
        self.check_channel_param("batchnorm", scale, c)?;
        self.check_channel_param("batchnorm", shift, c)?;
        let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, inner);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, scale, shift, &mean, &inv_std, n, c, inner);
        let v = self.push(
            Tensor::from_parts(sx, out),
            &[x, scale, shift],
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::invalid("batchnorm", format!("expected [n, c, ..], got {sx:?}")));
        }
        let (n, c, inner) = split_axis(&sx, 1);
        self.check_channel_param("batchnorm", scale, c)?;
        self.check_channel_param("batchnorm", shift, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm", &sx, &[running_mean.len()]));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, scale, shift, running_mean, &inv_std, n, c, inner);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            &[x, scale, shift],
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    fn check_channel_param(&self, op: &'static str, p: Var, c: usize) -> Result<()> {
        if self.shape(p) != [c] {
            return Err(Error::shape(op, self.shape(p), &[c]));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        inner: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let z = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = z;
                    out[j] = g[ch] * z + b[ch];
                }
            }
        }
        (xhat, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        check_finite("relu", self.value(x))?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, &[x], Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        check_finite("sigmoid", self.value(x))?;
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, &[x], Op::Sigmoid(x)))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        check_finite("softmax", self.value(x))?;
        let out = softmax_along(self.value(x).data(), &shape, axis);
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis }))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, &[x], Op::LnClamped { x, floor })
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [n, c, h, w] = nchw("pool2d", &sx)?;
        let (oh, ow) = match (
            kernels::window_out(h, kernel, stride, 0),
            kernels::window_out(w, kernel, stride, 0),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(
                    "pool2d",
                    format!("window {kernel}/{stride} gives an empty output for {h}x{w}"),
                ))
            }
        };
        let dims = PoolDims {
            planes: n * c,
            h,
            w,
            oh,
            ow,
            k: (kernel, kernel),
            s: (stride, stride),
        };
        let (out, argmax) = kernels::pool2d_forward(self.value(x).data(), kind, &dims);
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { x, argmax },
            PoolKind::Avg => Op::AvgPool { x, dims },
        };
        Ok(self.push(value, &[x], op))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [n, c, h, w] = nchw("global_avg_pool", &sx)?;
        let inv = T::one() / T::lit((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), &[x], Op::GlobalAvgPool(x)))
    }

    /// Mean over channels: `[n, c, h, w] -> [n, 1, h, w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [n, c, h, w] = nchw("channel_mean", &sx)?;
        let hw = h * w;
        let inv = T::one() / T::lit(c as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for i in 0..n {
            let o = &mut out[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let plane = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (a, &v) in o.iter_mut().zip(plane) {
                    *a += v;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, 1, h, w], out), &[x], Op::ChannelMean(x)))
    }

    /// Max over channels: `[n, c, h, w] -> [n, 1, h, w]`. Ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [n, c, h, w] = nchw("channel_max", &sx)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = vec![0; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut best = xv[i * c * hw + p];
                let mut best_idx = i * c * hw + p;
                for ch in 1..c {
                    let idx = (i * c + ch) * hw + p;
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                }
                out[i * hw + p] = best;
                argmax[i * hw + p] = best_idx;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            &[x],
            Op::ChannelMax { x, argmax },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&sx, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Inverted dropout: kept elements are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} not in [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let out = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(value, &[x], Op::Dropout { x, mask }))
    }

    /// Reverse pass from a scalar `loss`. Accumulation follows reverse tape order,
    /// so repeated calls on the same graph give bitwise-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contribs = self.backward_node(node, &g);
            if self.corrupt == Some(node.op.name()) {
                for (_, c) in contribs.iter_mut() {
                    for v in c.iter_mut() {
                        *v *= T::lit(1.5);
                    }
                }
            }
            for (var, c) in contribs {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.value(v).data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()),
            ],
            Op::Scale(a, k) => vec![(*a, g.iter().map(|&v| v * *k).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, d, m) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if needs(*a) {
                    let mut da = vec![T::zero(); n * d];
                    gemm(n, m, d, g, false, val(*b), true, T::zero(), &mut da);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); d * m];
                    gemm(d, n, m, val(*a), true, g, false, T::zero(), &mut db);
                    out.push((*b, db));
                }
                out
            }
            Op::AddBias(x, b) => {
                let (outer, c, inner) = split_axis(self.shape(*x), 1);
                let mut db = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, acc) in db.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *acc += g[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::ChannelScale(x, s) => {
                let [_, _, h, w] = nchw("channel_scale", self.shape(*x)).expect("checked in forward");
                let hw = h * w;
                let (xv, sv) = (val(*x), val(*s));
                let mut dx = vec![T::zero(); g.len()];
                let mut ds = vec![T::zero(); sv.len()];
                for (i, k) in sv.iter().enumerate() {
                    let r = i * hw..(i + 1) * hw;
                    let mut acc = T::zero();
                    for j in r {
                        dx[j] = g[j] * *k;
                        acc += g[j] * xv[j];
                    }
                    ds[i] = acc;
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::SpatialMask(x, m) => {
                let [n, c, h, w] = nchw("spatial_mask", self.shape(*x)).expect("checked in forward");
                let hw = h * w;
                let (xv, mv) = (val(*x), val(*m));
                let mut dx = vec![T::zero(); g.len()];
                let mut dm = vec![T::zero(); n * hw];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            dx[base + p] = g[base + p] * mv[i * hw + p];
                            dm[i * hw + p] += g[base + p] * xv[base + p];
                        }
                    }
                }
                vec![(*x, dx), (*m, dm)]
            }
            Op::Conv2d { x, w, b, spec, dims } => {
                let grads = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    spec,
                    dims,
                    needs(*x),
                    needs(*w),
                    b.is_some_and(|b| needs(b)),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = split_axis(self.shape(*x), 1);
                let gamma = val(*scale);
                let count = T::lit((n * inner) as f64);
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dscale[ch] += g[j] * xhat[j];
                            dshift[ch] += g[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        let k = gamma[ch] * inv_std[ch];
                        for j in base..base + inner {
                            dx[j] = if *batch_stats {
                                // dxhat = g * gamma; sums over the batch are dshift*gamma and dscale*gamma.
                                k * (g[j] - (dshift[ch] + xhat[j] * dscale[ch]) / count)
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*scale, dscale), (*shift, dshift)]
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                vec![(*x, dx)]
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LnClamped { x, floor } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > *floor { g / v } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                vec![(*x, dx)]
            }
            Op::AvgPool { x, dims } => vec![(*x, kernels::avg_pool2d_backward(g, dims))],
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = nchw("global_avg_pool", self.shape(*x)).expect("checked in forward");
                let hw = h * w;
                let inv = T::one() / T::lit(hw as f64);
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                vec![(*x, dx)]
            }
            Op::ChannelMean(x) => {
                let [n, c, h, w] = nchw("channel_mean", self.shape(*x)).expect("checked in forward");
                let hw = h * w;
                let inv = T::one() / T::lit(c as f64);
                let mut dx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(i * c + ch) * hw + p] = g[i * hw + p] * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::ChannelMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                vec![(*x, dx)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                for o in 0..outer {
                    let mut offset = 0;
                    for (k, v) in inputs.iter().enumerate() {
                        let len = self.shape(*v)[*axis];
                        let base = (o * total + offset) * inner;
                        parts[k].extend_from_slice(&g[base..base + len * inner]);
                        offset += len;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_along<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] = out[idx(k)] / total;
            }
        }
    }
    out
}
