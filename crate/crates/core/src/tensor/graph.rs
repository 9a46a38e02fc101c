//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value. Node ids grow
//! monotonically, so walking the tape backwards from the root visits each
//! node after all of its consumers: one pass, each node exactly once.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::dense::{numel, split_axis, Tensor};
use super::error::{Result, TensorError};
use super::gemm::{gemm, Trans};
use super::real::Real;
use crate::exec;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of an op defined outside this module.
pub trait Backward<T: Real>: Send + Sync {
    /// Gradient contribution for each input, in input order. `None` means
    /// the op does not depend on that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

/// Window geometry for [`Graph::unfold`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnfoldSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl UnfoldSpec {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddTrailing(Var, Var),
    Expand(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Take { x: Var, index: Vec<usize> },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Unfold(Var, UnfoldSpec),
    Custom(Vec<Var>, Box<dyn Backward<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of tensor operations for one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last `backward` root with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let block = self.trailing_block("add_trailing", self.shape(x), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(block) {
            chunk.iter_mut().zip(bv).for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(out, Op::AddTrailing(x, b), &[x, b]))
    }

    /// Repeat `x` over new leading dimensions so it takes `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let block = self.trailing_block("expand", shape, self.shape(x))?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(numel(shape));
        for _ in 0..numel(shape) / block {
            data.extend_from_slice(src);
        }
        let out = Tensor::from_vec(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Expand(x), &[x]))
    }

    fn trailing_block(&self, op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
        if small.len() > big.len() || big[big.len() - small.len()..] != *small {
            return Err(TensorError::Shape {
                op,
                lhs: big.to_vec(),
                rhs: small.to_vec(),
            });
        }
        Ok(numel(small))
    }

    /// Two-dimensional matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        self.linear(a, b)
    }

    /// Shared linear map over the last axis: `x[..., k] · w[k, n] -> [..., n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let k = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[0] != k {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let n = sw[1];
        let rows = self.value(x).numel() / k;
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            Trans::No,
            self.value(w).data(),
            Trans::No,
            &mut out,
            false,
        );
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::MatMul(x, w), &[x, w]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let out = permute_tensor(self.value(x), perm);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow: range {start}..{} outside extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Gather along the last axis with a separate index list per row.
    ///
    /// `index` holds `rows * k` entries, where `rows` is the product of the
    /// leading extents of `x`; the result has last extent `k`.
    pub fn take_last(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / c;
        if index.is_empty() || index.len() % rows != 0 || index.iter().any(|&i| i >= c) {
            return Err(TensorError::Invalid(format!(
                "take_last: bad index list of length {} for shape {shape:?}",
                index.len()
            )));
        }
        let k = index.len() / rows;
        let src = self.value(x).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(j, &i)| src[(j / k) * c + i])
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = k;
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Take { x, index }, &[x]))
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let mut out = self.value(x).clone();
        let (outer, n, inner) = split_axis(out.shape(), axis);
        for_each_lane(out.data_mut(), outer, n, inner, |lane| {
            let max = lane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            lane.iter_mut().for_each(|v| *v /= sum);
        });
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let mut out = self.value(x).clone();
        let (outer, n, inner) = split_axis(out.shape(), axis);
        for_each_lane(out.data_mut(), outer, n, inner, |lane| {
            let max = lane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum: T = lane.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            lane.iter_mut().for_each(|v| *v -= lse);
        });
        Ok(self.push(out, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Per-vector normalization over the last axis (biased variance), then
    /// `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let eps = T::lit(eps);
        let rows = self.value(x).numel() / d;
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::from_usize(d).unwrap();
        exec::for_each_row2(&mut xhat, d, &mut rstd, 1, |_, row, r| {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            r[0] = s;
        });
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let out = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Exact GELU, `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let len = out.numel();
        exec::for_each_row(out.data_mut(), row_len_for(len), |_, row| {
            row.iter_mut().for_each(|v| *v = gelu(*v));
        });
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over one axis, which is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let scale = T::one() / T::from_usize(n).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, &v)| *d += v);
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::MeanAxis(x, axis), &[x]))
    }

    /// Sliding-window patch extraction (im2col) over `[N, H, W, C]`.
    ///
    /// Output is `[N, Ho, Wo, kernel*kernel*C]` with the window flattened in
    /// (row, column, channel) order; out-of-range taps read zero.
    pub fn unfold(&mut self, x: Var, spec: UnfoldSpec) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Invalid(format!("unfold: expected [N,H,W,C], got {shape:?}")));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = match (spec.output_extent(h), spec.output_extent(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::Invalid(format!(
                    "unfold: window {spec:?} does not fit a {h}x{w} grid"
                )))
            }
        };
        let cols = spec.kernel * spec.kernel * c;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * ho * wo * cols];
        exec::for_each_row(&mut data, cols, |row, out| {
            let (img, oy, ox) = (row / (ho * wo), (row / wo) % ho, row % wo);
            for ky in 0..spec.kernel {
                for kx in 0..spec.kernel {
                    let Some((iy, ix)) = tap(oy, ox, ky, kx, spec, h, w) else {
                        continue;
                    };
                    let s = ((img * h + iy) * w + ix) * c;
                    let d = (ky * spec.kernel + kx) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        });
        let out = Tensor::from_vec(vec![n, ho, wo, cols], data)?;
        Ok(self.push(out, Op::Unfold(x, spec), &[x]))
    }

    /// Append an op whose value was computed elsewhere, with its own backward.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: Box<dyn Backward<T>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Populate the gradient of `root` with respect to every tracked leaf.
    ///
    /// Leaf gradients from an earlier call are replaced.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::NonScalarOutput(self.shape(root).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                self.nodes[id].grad = Some(Tensor::from_vec(shape, g)?);
                continue;
            }
            propagate(&self.nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

/// Row length used to chunk purely element-wise kernels.
fn row_len_for(len: usize) -> usize {
    if len % 1024 == 0 {
        1024
    } else {
        len
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

fn tap(oy: usize, ox: usize, ky: usize, kx: usize, spec: UnfoldSpec, h: usize, w: usize) -> Option<(usize, usize)> {
    let iy = (oy * spec.stride + ky).checked_sub(spec.padding)?;
    let ix = (ox * spec.stride + kx).checked_sub(spec.padding)?;
    (iy < h && ix < w).then_some((iy, ix))
}

/// Apply `f` to every lane along an axis, gathering strided lanes as needed.
fn for_each_lane<T: Real>(data: &mut [T], outer: usize, n: usize, inner: usize, f: impl Fn(&mut [T]) + Sync + Send) {
    if inner == 1 {
        exec::for_each_row(data, n, |_, lane| f(lane));
        return;
    }
    let mut lane = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                lane[j] = data[(o * n + j) * inner + i];
            }
            f(&mut lane);
            for j in 0..n {
                data[(o * n + j) * inner + i] = lane[j];
            }
        }
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut at = 0usize;
    for _ in 0..src.len() {
        data.push(src[at]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            at += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            at -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, data).expect("permutation preserves size")
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Add `f`'s contribution into the gradient buffer of `target`.
fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], target: Var, f: impl FnOnce(&mut [T])) {
    let node = &nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[target.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(buf);
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).zip(vb).for_each(|((d, &s), &y)| *d += s * y)
            });
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).zip(va).for_each(|((d, &s), &x)| *d += s * x)
            });
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c));
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
        }
        Op::AddTrailing(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            let block = val(*b).numel();
            accumulate(nodes, grads, *b, |d| g.chunks(block).for_each(|c| add_into(d, c)));
        }
        Op::Expand(x) => {
            let block = val(*x).numel();
            accumulate(nodes, grads, *x, |d| g.chunks(block).for_each(|c| add_into(d, c)));
        }
        Op::MatMul(x, w) => {
            let (vx, vw) = (val(*x), val(*w));
            let k = vw.shape()[0];
            let n = vw.shape()[1];
            let rows = vx.numel() / k;
            accumulate(nodes, grads, *x, |d| {
                gemm(rows, n, k, g, Trans::No, vw.data(), Trans::Yes, d, true)
            });
            accumulate(nodes, grads, *w, |d| {
                gemm(k, rows, n, vx.data(), Trans::Yes, g, Trans::No, d, true)
            });
        }
        Op::Permute(x, perm) => {
            let gt = Tensor::from_vec(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
            let back = permute_tensor(&gt, &inverse_permutation(perm));
            accumulate(nodes, grads, *x, |d| add_into(d, back.data()));
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let n = val(x).shape()[*axis];
                accumulate(nodes, grads, x, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        add_into(&mut d[o * n * inner..(o + 1) * n * inner], src);
                    }
                });
                offset += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Take { x, index } => {
            let c = *val(*x).shape().last().unwrap();
            let k = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *x, |d| {
                for (j, &i) in index.iter().enumerate() {
                    d[(j / k) * c + i] += g[j];
                }
            });
        }
        Op::Softmax(x, axis) => {
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax(x, axis) => {
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: T = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma).data();
            let d = gv.len();
            accumulate(nodes, grads, *gamma, |dg| {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    dg.iter_mut().zip(gr).zip(xr).for_each(|((a, &s), &h)| *a += s * h);
                }
            });
            accumulate(nodes, grads, *beta, |db| g.chunks(d).for_each(|gr| add_into(db, gr)));
            accumulate(nodes, grads, *x, |dx| {
                let inv_d = T::one() / T::from_usize(d).unwrap();
                exec::for_each_row(dx, d, |r, out| {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = T::zero();
                    let mut mean_ghx = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                    }
                    mean_gh *= inv_d;
                    mean_ghx *= inv_d;
                    for j in 0..d {
                        out[j] += rstd[r] * (gr[j] * gv[j] - mean_gh - hr[j] * mean_ghx);
                    }
                });
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |d| {
                exec::for_each_row(d, row_len_for(xv.len()), |r, out| {
                    let base = r * out.len();
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += g[base + j] * gelu_grad(xv[base + j]);
                    }
                });
            });
        }
        Op::Exp(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, &s), &e)| *d += s * e)
            });
        }
        Op::Log(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).zip(xv).for_each(|((d, &s), &v)| *d += s / v)
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(x) => {
            let s = g[0] / T::from_usize(val(*x).numel()).unwrap();
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += s));
        }
        Op::MeanAxis(x, axis) => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            let scale = T::one() / T::from_usize(n).unwrap();
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * scale);
                    }
                }
            });
        }
        Op::Unfold(x, spec) => {
            let s = val(*x).shape();
            let (h, w, c) = (s[1], s[2], s[3]);
            let os = node.value.shape();
            let (ho, wo, cols) = (os[1], os[2], os[3]);
            accumulate(nodes, grads, *x, |d| {
                for (row, gr) in g.chunks(cols).enumerate() {
                    let (img, oy, ox) = (row / (ho * wo), (row / wo) % ho, row % wo);
                    for ky in 0..spec.kernel {
                        for kx in 0..spec.kernel {
                            let Some((iy, ix)) = tap(oy, ox, ky, kx, *spec, h, w) else {
                                continue;
                            };
                            let at = ((img * h + iy) * w + ix) * c;
                            let from = (ky * spec.kernel + kx) * c;
                            add_into(&mut d[at..at + c], &gr[from..from + c]);
                        }
                    }
                }
            });
        }
        Op::Custom(inputs, f) => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            let contributions = f.backward(&ins, &node.value, g);
            for (&v, contribution) in inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    accumulate(nodes, grads, v, |d| add_into(d, &c));
                }
            }
        }
    }
}
