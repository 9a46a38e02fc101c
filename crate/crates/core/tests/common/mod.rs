//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here works on plain `f64` slices with explicit index loops and
//! shares no code with the library beyond the parameter structs.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stt_core::stt::{AttentionAxis, AttnParams, AttnVars, MlpParams, MlpVars};
use stt_core::tensor::{Graph, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_attn(d: usize, rng: &mut ChaCha8Rng) -> AttnParams<f64> {
    let w = |rng: &mut ChaCha8Rng| Tensor::randn([d, d], 0.5, rng);
    AttnParams {
        ln_gamma: Tensor::randn([d], 1.0, rng).map(|v| v + 1.0),
        ln_beta: Tensor::randn([d], 0.3, rng),
        w_q: w(rng),
        w_k: w(rng),
        w_v: w(rng),
        w_o: w(rng),
    }
}

pub fn bind_attn(g: &mut Graph<f64>, p: &AttnParams<f64>) -> AttnVars {
    AttnVars {
        ln_gamma: g.param(p.ln_gamma.clone()),
        ln_beta: g.param(p.ln_beta.clone()),
        w_q: g.param(p.w_q.clone()),
        w_k: g.param(p.w_k.clone()),
        w_v: g.param(p.w_v.clone()),
        w_o: g.param(p.w_o.clone()),
    }
}

pub fn bind_mlp(g: &mut Graph<f64>, p: &MlpParams<f64>) -> MlpVars {
    MlpVars {
        ln_gamma: g.param(p.ln_gamma.clone()),
        ln_beta: g.param(p.ln_beta.clone()),
        w1: g.param(p.w1.clone()),
        w2: g.param(p.w2.clone()),
    }
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * s * g + b).collect()
}

/// Row vector times a `[rows, cols]` row-major matrix.
pub fn vec_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols).map(|j| (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum()).collect()
}

/// One pre-norm attention stage (normalize, project, attend, project back,
/// add the residual) over a single clip `z [P, S, d]`. Returns the new tokens
/// and the weights `[P, S, heads, keys]`.
pub fn attention_stage(
    z: &[f64],
    patches: usize,
    slots: usize,
    d: usize,
    heads: usize,
    p: &AttnParams<f64>,
    axis: AttentionAxis,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let n = patches * slots;
    let tok = |i: usize| &z[i * d..(i + 1) * d];
    let normed: Vec<Vec<f64>> = (0..n).map(|i| layer_norm(tok(i), p.ln_gamma.data(), p.ln_beta.data())).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &p.w_q)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &p.w_k)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &p.w_v)).collect();
    let index = |pp: usize, t: usize| pp * slots + t;
    let mut out = z.to_vec();
    let mut weights = Vec::new();
    for pp in 0..patches {
        for t in 0..slots {
            let keys: Vec<usize> = match axis {
                AttentionAxis::Spatial => (0..patches).map(|p2| index(p2, t)).collect(),
                AttentionAxis::Temporal => std::iter::once(index(0, 0))
                    .chain((1..slots).map(|t2| index(pp, t2)))
                    .collect(),
            };
            let i = index(pp, t);
            let mut concat = vec![0.0; d];
            for a in 0..heads {
                let r = a * dh..(a + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let total: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&keys) {
                    let alpha = w / total;
                    weights.push(alpha);
                    for c in r.clone() {
                        concat[c] += alpha * v[j][c];
                    }
                }
            }
            let proj = vec_mat(&concat, &p.w_o);
            for c in 0..d {
                out[i * d + c] += proj[c];
            }
        }
    }
    (out, weights)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `log softmax(row)` computed the textbook way.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Pre-norm MLP with residual on one token.
pub fn mlp(x: &[f64], p: &MlpParams<f64>) -> Vec<f64> {
    let h: Vec<f64> = vec_mat(&layer_norm(x, p.ln_gamma.data(), p.ln_beta.data()), &p.w1)
        .into_iter()
        .map(gelu)
        .collect();
    vec_mat(&h, &p.w2).iter().zip(x).map(|(a, b)| a + b).collect()
}

/// Logits of one clip `[F, H, W, C]` for a model with a precomputed stem,
/// following the block equations token by token.
pub fn dense_forward(params: &stt_core::stt::ModelParams<f64>, cfg: &stt_core::stt::ModelConfig, clip: &[f64]) -> Vec<f64> {
    let (f, d) = (cfg.frames, cfg.dim);
    let patches = cfg.patches();
    let c = cfg.stem.in_channels;
    let slots = f + 1;
    let mut z = vec![0.0; patches * slots * d];
    for p in 0..patches {
        for t in 0..slots {
            let mut tok = if t == 0 {
                params.pos.cls.data().to_vec()
            } else {
                let feat = &clip[((t - 1) * patches + p) * c..][..c];
                let mut v = vec_mat(feat, &params.proj);
                for (x, e) in v.iter_mut().zip(&params.pos.space.data()[p * d..(p + 1) * d]) {
                    *x += e;
                }
                v
            };
            if cfg.uses_time_embedding() {
                for (x, e) in tok.iter_mut().zip(&params.pos.time.data()[t * d..(t + 1) * d]) {
                    *x += e;
                }
            }
            z[(p * slots + t) * d..][..d].copy_from_slice(&tok);
        }
    }
    for block in &params.blocks {
        if let Some(sp) = &block.spatial {
            z = attention_stage(&z, patches, slots, d, cfg.heads, sp, AttentionAxis::Spatial).0;
        }
        if let Some(tp) = &block.temporal {
            z = attention_stage(&z, patches, slots, d, cfg.heads, tp, AttentionAxis::Temporal).0;
        }
        z = z.chunks(d).flat_map(|tok| mlp(tok, &block.mlp)).collect();
    }
    let pooled: Vec<f64> = if cfg.temporal {
        z[..d].to_vec()
    } else {
        let mut acc = vec![0.0; d];
        for p in 0..patches {
            for t in 1..slots {
                for (a, x) in acc.iter_mut().zip(&z[(p * slots + t) * d..][..d]) {
                    *a += x / (patches * f) as f64;
                }
            }
        }
        acc
    };
    vec_mat(&pooled, &params.head.weight)
        .iter()
        .zip(params.head.bias.data())
        .map(|(a, b)| a + b)
        .collect()
}
