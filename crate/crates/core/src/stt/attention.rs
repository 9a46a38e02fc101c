//! Fused multi-head scaled dot-product attention over a token grid.
//!
//! Tokens are laid out `[B, P, S, d]` (clip, spatial position, temporal slot,
//! channel). Head `a` owns channels `a*D_h .. (a+1)*D_h`. The two attention
//! patterns differ only in which keys a query is compared against:
//!
//! * spatial: query `(p, t)` sees `(p', t)` for every `p'`;
//! * temporal: query `(p, t)` sees the classification key `(0, 0)` followed
//!   by `(p, t')` for `t' = 1..S-1`.
//!
//! The forward pass keeps the attention weights so the backward pass never
//! recomputes a softmax.

use std::sync::Arc;

use crate::exec;
use crate::tensor::{Backward, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionAxis {
    Spatial,
    Temporal,
}

impl AttentionAxis {
    /// Keys compared against each query.
    pub fn key_count(self, patches: usize, slots: usize) -> usize {
        match self {
            Self::Spatial => patches,
            Self::Temporal => slots,
        }
    }

    /// Token index within one clip of the `j`-th key seen by query `(p, t)`.
    #[inline]
    pub fn key_token(self, p: usize, t: usize, j: usize, slots: usize) -> usize {
        match self {
            Self::Spatial => j * slots + t,
            Self::Temporal if j == 0 => 0,
            Self::Temporal => p * slots + j,
        }
    }
}

/// Geometry of one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub patches: usize,
    pub slots: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn clip_len(&self) -> usize {
        self.patches * self.slots * self.dim()
    }
}

/// Output of [`attend`]: the concatenated head outputs and the weights.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    /// `[B, P, S, d]`, heads concatenated along the channel axis.
    pub output: Var,
    /// `[B, P, S, heads, keys]`, each trailing row a probability vector.
    pub weights: Arc<Tensor<T>>,
}

/// Multi-head attention of `q` against `k`/`v` along `axis`.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    axis: AttentionAxis,
) -> Result<Attention<T>, TensorError> {
    let s = g.shape(q).to_vec();
    if s.len() != 4 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(TensorError::Shape {
            op: "attend",
            lhs: s,
            rhs: g.shape(k).to_vec(),
        });
    }
    if heads == 0 || s[3] % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "attend: {heads} heads do not divide width {}",
            s[3]
        )));
    }
    let shape = AttentionShape {
        batch: s[0],
        patches: s[1],
        slots: s[2],
        heads,
        head_dim: s[3] / heads,
    };
    let (out, weights) = forward(shape, axis, g.value(q).data(), g.value(k).data(), g.value(v).data());
    let nk = axis.key_count(shape.patches, shape.slots);
    let weights = Arc::new(
        Tensor::from_vec(vec![shape.batch, shape.patches, shape.slots, heads, nk], weights)
            .expect("weights sized by construction"),
    );
    let output = Tensor::from_vec(s, out).expect("output sized by construction");
    let op = AttendBackward {
        shape,
        axis,
        weights: Arc::clone(&weights),
    };
    let output = g.custom(&[q, k, v], output, Box::new(op));
    Ok(Attention { output, weights })
}

fn forward<T: Real>(shape: AttentionShape, axis: AttentionAxis, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let AttentionShape {
        batch,
        patches,
        slots,
        heads,
        head_dim,
    } = shape;
    let d = shape.dim();
    let nk = axis.key_count(patches, slots);
    let clip = shape.clip_len();
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * clip];
    let mut weights = vec![T::zero(); batch * patches * slots * heads * nk];
    exec::for_each_row2(&mut out, clip, &mut weights, patches * slots * heads * nk, |b, out, w| {
        let (q, k, v) = (&q[b * clip..][..clip], &k[b * clip..][..clip], &v[b * clip..][..clip]);
        for p in 0..patches {
            for t in 0..slots {
                let i = p * slots + t;
                for a in 0..heads {
                    let off = a * head_dim;
                    let qi = &q[i * d + off..][..head_dim];
                    let row = &mut w[(i * heads + a) * nk..][..nk];
                    let mut max = T::neg_infinity();
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &k[axis.key_token(p, t, j, slots) * d + off..][..head_dim];
                        *r = dot(qi, kj) * scale;
                        max = max.max(*r);
                    }
                    let mut sum = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= sum);
                    let oi = &mut out[i * d + off..][..head_dim];
                    for (j, &alpha) in row.iter().enumerate() {
                        let vj = &v[axis.key_token(p, t, j, slots) * d + off..][..head_dim];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += alpha * x);
                    }
                }
            }
        }
    });
    (out, weights)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

struct AttendBackward<T> {
    shape: AttentionShape,
    axis: AttentionAxis,
    weights: Arc<Tensor<T>>,
}

impl<T: Real> Backward<T> for AttendBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let AttentionShape {
            batch,
            patches,
            slots,
            heads,
            head_dim,
        } = self.shape;
        let axis = self.axis;
        let d = self.shape.dim();
        let nk = axis.key_count(patches, slots);
        let clip = self.shape.clip_len();
        let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let w_all = self.weights.data();
        let wlen = patches * slots * heads * nk;
        // dq, dk and dv for one clip live side by side so clips stay independent.
        let mut grads = vec![T::zero(); batch * 3 * clip];
        exec::for_each_row(&mut grads, 3 * clip, |b, buf| {
            let (dq, rest) = buf.split_at_mut(clip);
            let (dk, dv) = rest.split_at_mut(clip);
            let (q, k, v) = (&q[b * clip..][..clip], &k[b * clip..][..clip], &v[b * clip..][..clip]);
            let go = &grad_output[b * clip..][..clip];
            let w = &w_all[b * wlen..][..wlen];
            let mut ds = vec![T::zero(); nk];
            for p in 0..patches {
                for t in 0..slots {
                    let i = p * slots + t;
                    for a in 0..heads {
                        let off = a * head_dim;
                        let row = &w[(i * heads + a) * nk..][..nk];
                        let goi = &go[i * d + off..][..head_dim];
                        let mut c = T::zero();
                        for (j, (&alpha, s)) in row.iter().zip(ds.iter_mut()).enumerate() {
                            let kt = axis.key_token(p, t, j, slots) * d + off;
                            *s = dot(goi, &v[kt..][..head_dim]);
                            c += alpha * *s;
                            dv[kt..][..head_dim]
                                .iter_mut()
                                .zip(goi)
                                .for_each(|(x, &gv)| *x += alpha * gv);
                        }
                        let qi = &q[i * d + off..][..head_dim];
                        for (j, (&alpha, &s)) in row.iter().zip(&ds).enumerate() {
                            let kt = axis.key_token(p, t, j, slots) * d + off;
                            let dscore = alpha * (s - c) * scale;
                            dq[i * d + off..][..head_dim]
                                .iter_mut()
                                .zip(&k[kt..][..head_dim])
                                .for_each(|(x, &kv)| *x += dscore * kv);
                            dk[kt..][..head_dim]
                                .iter_mut()
                                .zip(qi)
                                .for_each(|(x, &qv)| *x += dscore * qv);
                        }
                    }
                }
            }
        });
        let mut dq = Vec::with_capacity(batch * clip);
        let mut dk = Vec::with_capacity(batch * clip);
        let mut dv = Vec::with_capacity(batch * clip);
        for buf in grads.chunks(3 * clip) {
            dq.extend_from_slice(&buf[..clip]);
            dk.extend_from_slice(&buf[clip..2 * clip]);
            dv.extend_from_slice(&buf[2 * clip..]);
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}
