//! The spatio-temporal transformer: `N` blocks of spatial attention,
//! temporal attention and a token MLP, read out by a linear head.

mod attention;

use std::sync::Arc;

use rand::Rng;

pub use attention::{attend, Attention, AttentionAxis, AttentionShape};

use crate::embed::{
    assemble_input, stem_forward, tokenize_project, PositionalEmbeddings, PositionalVars, StemConfig, StemKind,
    StemParams, StemVars,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var, LN_EPS};

/// How the classifier reads the final token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Readout {
    /// The classification token at spatial position 0, slot 0.
    ClassToken,
    /// Mean over every spatial position of frame slots `1..=F`.
    FrameMean,
}

/// Model geometry and the attention stages that are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub stem: StemConfig,
    /// Sampled frames per clip, `F`.
    pub frames: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub spatial: bool,
    pub temporal: bool,
}

impl ModelConfig {
    /// Full-size geometry: 16 frames of 4x4x512 backbone features, `d = 512`,
    /// 4 blocks of 8 heads, 7 classes.
    pub fn full_scale() -> Self {
        Self {
            stem: StemConfig {
                kind: StemKind::Precomputed,
                in_height: 4,
                in_width: 4,
                in_channels: 512,
                channels: 512,
            },
            frames: 16,
            dim: 512,
            heads: 8,
            blocks: 4,
            mlp_hidden: 2048,
            classes: 7,
            spatial: true,
            temporal: true,
        }
    }

    /// Desk-scale default: 8 frames of 16x16 grey images cut into a 4x4 grid
    /// of patches, `d = 64`, 2 blocks of 4 heads.
    pub fn desk() -> Self {
        Self {
            stem: StemConfig {
                kind: StemKind::LinearPatch { patch: 4 },
                in_height: 16,
                in_width: 16,
                in_channels: 1,
                channels: 32,
            },
            frames: 8,
            dim: 64,
            heads: 4,
            blocks: 2,
            mlp_hidden: 256,
            classes: 2,
            spatial: true,
            temporal: true,
        }
    }

    /// Smallest geometry that exercises every code path; used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            stem: StemConfig {
                kind: StemKind::Precomputed,
                in_height: 2,
                in_width: 2,
                in_channels: 4,
                channels: 4,
            },
            frames: 4,
            dim: 16,
            heads: 2,
            blocks: 2,
            mlp_hidden: 32,
            classes: 3,
            spatial: true,
            temporal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        if self.frames == 0 || self.dim == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return Err(Error::config(format!("model extents must be positive: {self:?}")));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.stem.patches()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn readout(&self) -> Readout {
        if self.temporal {
            Readout::ClassToken
        } else {
            Readout::FrameMean
        }
    }

    /// The temporal positional embedding is dropped when neither attention
    /// stage is on, which makes that variant blind to frame order.
    pub fn uses_time_embedding(&self) -> bool {
        self.spatial || self.temporal
    }

    /// Frame tensor shape for a batch of `batch` clips.
    pub fn frame_shape(&self, batch: usize) -> Vec<usize> {
        vec![
            batch,
            self.frames,
            self.stem.in_height,
            self.stem.in_width,
            self.stem.in_channels,
        ]
    }
}

/// Pre-norm attention stage: `LN`, bias-free query/key/value maps (heads
/// concatenated along the output axis) and the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    /// `[d, d_mlp]`
    pub w1: Tensor<T>,
    /// `[d_mlp, d]`
    pub w2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub spatial: Option<AttnParams<T>>,
    pub temporal: Option<AttnParams<T>>,
    pub mlp: MlpParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `[d, C]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub stem: StemParams<T>,
    /// `[C_stem, d]` token projection.
    pub proj: Tensor<T>,
    pub pos: PositionalEmbeddings<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: HeadParams<T>,
}

impl<T: Real> AttnParams<T> {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut w = || fan_in_init(d, d, rng);
        Self {
            ln_gamma: Tensor::ones([d]),
            ln_beta: Tensor::zeros([d]),
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 6] {
        [&self.ln_gamma, &self.ln_beta, &self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
        ]
    }
}

impl<T: Real> MlpParams<T> {
    fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln_gamma: Tensor::ones([d]),
            ln_beta: Tensor::zeros([d]),
            w1: fan_in_init(d, hidden, rng),
            w2: fan_in_init(hidden, d, rng),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.ln_gamma, &self.ln_beta, &self.w1, &self.w2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.ln_gamma, &mut self.ln_beta, &mut self.w1, &mut self.w2]
    }
}

/// `[fan_in, fan_out]` weight with entries `N(0, 1/fan_in)`.
fn fan_in_init<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

const ATTN_NAMES: [&str; 6] = ["ln_gamma", "ln_beta", "w_q", "w_k", "w_v", "w_o"];
const MLP_NAMES: [&str; 4] = ["ln_gamma", "ln_beta", "w1", "w2"];

impl<T: Real> ModelParams<T> {
    /// Random initialization. Draw order: stem, projection, positional
    /// embeddings, blocks in order, head.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let stem = StemParams::init(&cfg.stem, rng);
        let proj = fan_in_init(cfg.stem.channels, d, rng);
        let pos = PositionalEmbeddings::init(cfg.patches(), cfg.frames, d, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                spatial: cfg.spatial.then(|| AttnParams::init(d, rng)),
                temporal: cfg.temporal.then(|| AttnParams::init(d, rng)),
                mlp: MlpParams::init(d, cfg.mlp_hidden, rng),
            })
            .collect();
        let head = HeadParams {
            weight: fan_in_init(d, cfg.classes, rng),
            bias: Tensor::zeros([cfg.classes]),
        };
        Ok(Self {
            stem,
            proj,
            pos,
            blocks,
            head,
        })
    }

    /// Every tensor with a dotted name, in the fixed serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.stem.layers.iter().enumerate() {
            out.push((format!("stem.{i}.weight"), &l.weight));
            out.push((format!("stem.{i}.bias"), &l.bias));
        }
        out.push(("proj".to_string(), &self.proj));
        out.push(("pos.space".to_string(), &self.pos.space));
        out.push(("pos.time".to_string(), &self.pos.time));
        out.push(("pos.cls".to_string(), &self.pos.cls));
        for (i, b) in self.blocks.iter().enumerate() {
            for (stage, p) in [("spatial", &b.spatial), ("temporal", &b.temporal)] {
                if let Some(p) = p {
                    for (n, t) in ATTN_NAMES.iter().zip(p.tensors()) {
                        out.push((format!("block.{i}.{stage}.{n}"), t));
                    }
                }
            }
            for (n, t) in MLP_NAMES.iter().zip(b.mlp.tensors()) {
                out.push((format!("block.{i}.mlp.{n}"), t));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in &mut self.stem.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.proj);
        out.push(&mut self.pos.space);
        out.push(&mut self.pos.time);
        out.push(&mut self.pos.cls);
        for b in &mut self.blocks {
            if let Some(p) = &mut b.spatial {
                out.extend(p.tensors_mut());
            }
            if let Some(p) = &mut b.temporal {
                out.extend(p.tensors_mut());
            }
            out.extend(b.mlp.tensors_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuild from tensors in serialization order, checking every shape.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = Self::zeros(cfg)?;
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::config(format!(
                "model geometry needs {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter shape {:?} does not match geometry {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    /// All-zero parameters with the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let attn = || AttnParams {
            ln_gamma: Tensor::zeros([d]),
            ln_beta: Tensor::zeros([d]),
            w_q: Tensor::zeros([d, d]),
            w_k: Tensor::zeros([d, d]),
            w_v: Tensor::zeros([d, d]),
            w_o: Tensor::zeros([d, d]),
        };
        Ok(Self {
            stem: StemParams {
                layers: cfg
                    .stem
                    .layers()
                    .into_iter()
                    .map(|(_, fan_in, out)| crate::embed::StemLayer {
                        weight: Tensor::zeros([fan_in, out]),
                        bias: Tensor::zeros([out]),
                    })
                    .collect(),
            },
            proj: Tensor::zeros([cfg.stem.channels, d]),
            pos: PositionalEmbeddings::zeros(cfg.patches(), cfg.frames, d),
            blocks: (0..cfg.blocks)
                .map(|_| BlockParams {
                    spatial: cfg.spatial.then(attn),
                    temporal: cfg.temporal.then(attn),
                    mlp: MlpParams {
                        ln_gamma: Tensor::zeros([d]),
                        ln_beta: Tensor::zeros([d]),
                        w1: Tensor::zeros([d, cfg.mlp_hidden]),
                        w2: Tensor::zeros([cfg.mlp_hidden, d]),
                    },
                })
                .collect(),
            head: HeadParams {
                weight: Tensor::zeros([d, cfg.classes]),
                bias: Tensor::zeros([cfg.classes]),
            },
        })
    }

    /// Convert every tensor to another precision.
    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> Result<ModelParams<U>> {
        ModelParams::from_tensors(cfg, self.tensors().into_iter().map(|t| t.cast()).collect())
    }

    /// Put every tensor on `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        self.bind_with(g, true)
    }

    /// Put every tensor on `g` as an untracked leaf, so no backward state
    /// is recorded.
    pub fn bind_constants(&self, g: &mut Graph<T>) -> ModelVars {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, tracked: bool) -> ModelVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t.clone(), tracked)).collect();
        ModelVars::from_flat(self, &vars)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w1: Var,
    pub w2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub spatial: Option<AttnVars>,
    pub temporal: Option<AttnVars>,
    pub mlp: MlpVars,
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub stem: StemVars,
    pub proj: Var,
    pub pos: PositionalVars,
    pub blocks: Vec<BlockVars>,
    pub head: (Var, Var),
}

impl ModelVars {
    /// Handles for `vars`, laid out in the serialization order of `params`.
    pub fn from_flat<T: Real>(params: &ModelParams<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), params.tensors().len(), "one handle per parameter tensor");
        let mut it = vars.iter().copied();
        let mut next = move || it.next().expect("length checked");
        let stem = StemVars {
            layers: params.stem.layers.iter().map(|_| (next(), next())).collect(),
        };
        let proj = next();
        let pos = PositionalVars {
            space: next(),
            time: next(),
            cls: next(),
        };
        let attn = |present: bool, next: &mut dyn FnMut() -> Var| {
            present.then(|| AttnVars {
                ln_gamma: next(),
                ln_beta: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
            })
        };
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockVars {
                spatial: attn(b.spatial.is_some(), &mut next),
                temporal: attn(b.temporal.is_some(), &mut next),
                mlp: MlpVars {
                    ln_gamma: next(),
                    ln_beta: next(),
                    w1: next(),
                    w2: next(),
                },
            })
            .collect();
        let head = (next(), next());
        Self {
            stem,
            proj,
            pos,
            blocks,
            head,
        }
    }

    /// Handles in the serialization order of [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.stem.layers {
            out.extend([w, b]);
        }
        out.extend([self.proj, self.pos.space, self.pos.time, self.pos.cls]);
        for b in &self.blocks {
            for a in [b.spatial, b.temporal].into_iter().flatten() {
                out.extend([a.ln_gamma, a.ln_beta, a.w_q, a.w_k, a.w_v, a.w_o]);
            }
            out.extend([b.mlp.ln_gamma, b.mlp.ln_beta, b.mlp.w1, b.mlp.w2]);
        }
        out.extend([self.head.0, self.head.1]);
        out
    }
}

/// Pre-norm query, key and value maps of a token grid `[B, P, S, d]`.
///
/// Each result is `[B, P, S, d]`; reshaping its last axis to `[N_h, D_h]`
/// gives the per-head vectors.
pub fn qkv_project<T: Real>(g: &mut Graph<T>, z: Var, p: &AttnVars) -> Result<(Var, Var, Var)> {
    let normed = g.layer_norm(z, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let q = g.linear(normed, p.w_q)?;
    let k = g.linear(normed, p.w_k)?;
    let v = g.linear(normed, p.w_v)?;
    Ok((q, k, v))
}

/// One attention stage with output projection and residual.
fn attention_stage<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    p: &AttnVars,
    heads: usize,
    axis: AttentionAxis,
) -> Result<Attention<T>> {
    if g.shape(z).len() != 4 {
        return Err(Error::config(format!("expected a token grid [B,P,S,d], got {:?}", g.shape(z))));
    }
    let (q, k, v) = qkv_project(g, z, p)?;
    let att = attend(g, q, k, v, heads, axis)?;
    let projected = g.linear(att.output, p.w_o)?;
    let output = g.add(projected, z)?;
    Ok(Attention {
        output,
        weights: att.weights,
    })
}

/// Multi-head attention among the spatial positions of each temporal slot,
/// classification slot included.
pub fn spatial_attention<T: Real>(g: &mut Graph<T>, z: Var, p: &AttnVars, heads: usize) -> Result<Attention<T>> {
    attention_stage(g, z, p, heads, AttentionAxis::Spatial)
}

/// Multi-head attention along each position's temporal stream, with the
/// classification token at `(0, 0)` as the first key.
pub fn temporal_attention<T: Real>(g: &mut Graph<T>, z: Var, p: &AttnVars, heads: usize) -> Result<Attention<T>> {
    attention_stage(g, z, p, heads, AttentionAxis::Temporal)
}

/// `W2 * gelu(W1 * LN(z)) + z`, token by token.
pub fn block_mlp<T: Real>(g: &mut Graph<T>, z: Var, p: &MlpVars) -> Result<Var> {
    let normed = g.layer_norm(z, p.ln_gamma, p.ln_beta, LN_EPS)?;
    let hidden = g.linear(normed, p.w1)?;
    let act = g.gelu(hidden);
    let out = g.linear(act, p.w2)?;
    Ok(g.add(out, z)?)
}

/// Final token grid plus the attention weights of every stage that ran.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub tokens: Var,
    pub spatial_weights: Vec<Arc<Tensor<T>>>,
    pub temporal_weights: Vec<Arc<Tensor<T>>>,
}

/// Run every block over `z0 [B, P, F+1, d]`.
pub fn encode<T: Real>(g: &mut Graph<T>, z0: Var, vars: &ModelVars, cfg: &ModelConfig) -> Result<Encoded<T>> {
    let expected = [cfg.patches(), cfg.frames + 1, cfg.dim];
    let s = g.shape(z0);
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::config(format!(
            "token grid {s:?} does not match geometry [B, {}, {}, {}]",
            expected[0], expected[1], expected[2]
        )));
    }
    if vars.blocks.len() != cfg.blocks {
        return Err(Error::config(format!(
            "parameters hold {} blocks, geometry wants {}",
            vars.blocks.len(),
            cfg.blocks
        )));
    }
    let mut z = z0;
    let mut spatial_weights = Vec::new();
    let mut temporal_weights = Vec::new();
    for block in &vars.blocks {
        if let Some(p) = &block.spatial {
            let a = spatial_attention(g, z, p, cfg.heads)?;
            z = a.output;
            spatial_weights.push(a.weights);
        }
        if let Some(p) = &block.temporal {
            let a = temporal_attention(g, z, p, cfg.heads)?;
            z = a.output;
            temporal_weights.push(a.weights);
        }
        z = block_mlp(g, z, &block.mlp)?;
    }
    Ok(Encoded {
        tokens: z,
        spatial_weights,
        temporal_weights,
    })
}

/// Logits `[B, C]` from the final token grid.
pub fn classify<T: Real>(g: &mut Graph<T>, tokens: Var, vars: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    let b = g.shape(tokens)[0];
    let pooled = match cfg.readout() {
        Readout::ClassToken => {
            let patch0 = g.narrow(tokens, 1, 0, 1)?;
            let slot0 = g.narrow(patch0, 2, 0, 1)?;
            g.reshape(slot0, &[b, cfg.dim])?
        }
        Readout::FrameMean => {
            let frames = g.narrow(tokens, 2, 1, cfg.frames)?;
            let flat = g.reshape(frames, &[b, cfg.patches() * cfg.frames, cfg.dim])?;
            g.mean_axis(flat, 1)?
        }
    };
    let logits = g.linear(pooled, vars.head.0)?;
    Ok(g.add_trailing(logits, vars.head.1)?)
}

/// Input embedding `z0 [B, P, F+1, d]` from sampled frames `[B, F, H0, W0, C_in]`.
pub fn embed<T: Real>(g: &mut Graph<T>, frames: Var, vars: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    if g.shape(frames).len() != 5 || g.shape(frames)[1] != cfg.frames {
        return Err(Error::config(format!(
            "expected {} frames per clip, got input {:?}",
            cfg.frames,
            g.shape(frames)
        )));
    }
    let features = stem_forward(g, frames, &cfg.stem, &vars.stem)?;
    let tokens = tokenize_project(g, features, vars.proj)?;
    assemble_input(g, tokens, &vars.pos, cfg.uses_time_embedding())
}

/// Logits `[B, C]` for a batch of sampled clips.
pub fn forward<T: Real>(g: &mut Graph<T>, frames: Var, vars: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    let z0 = embed(g, frames, vars, cfg)?;
    let enc = encode(g, z0, vars, cfg)?;
    classify(g, enc.tokens, vars, cfg)
}

/// Logits for a batch of sampled clips without keeping gradients around.
pub fn predict_logits<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, frames: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind_constants(&mut g);
    let x = g.constant(frames);
    let logits = forward(&mut g, x, &vars, cfg)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests;
