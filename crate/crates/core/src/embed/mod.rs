//! Input embedding: frame sampling, the per-frame stem, token projection and
//! positional embeddings with the classification slot.
//!
//! Activations are batched. A clip batch is `[B, F, H0, W0, C_in]`; the
//! token grid handed to the transformer is `[B, P, F+1, d]` with `P = H*W`
//! spatial positions and temporal slot 0 reserved for the classification
//! token.

mod features;
mod sampling;

use rand::Rng;

pub use features::{read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use sampling::{sample_frames, segment_bounds, SampleMode, SamplingPlan};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, UnfoldSpec, Var};

/// Standard deviation of the normal used for the classification token.
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of the spatial and temporal embeddings. At 0.02 the
/// tokens of different positions are nearly indistinguishable after the first
/// layer norm and training stalls for hundreds of epochs on motion tasks.
pub const POS_INIT_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StemKind {
    /// Two 3x3 stride-2 convolutions with a GELU between them.
    ConvStem,
    /// Non-overlapping `patch x patch` windows, one linear map.
    LinearPatch { patch: usize },
    /// Input frames already are `H x W x C` feature grids.
    Precomputed,
}

/// Per-frame feature extractor geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StemConfig {
    pub kind: StemKind,
    pub in_height: usize,
    pub in_width: usize,
    pub in_channels: usize,
    /// Output channels `C`.
    pub channels: usize,
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_height == 0 || self.in_width == 0 || self.in_channels == 0 || self.channels == 0 {
            return Err(Error::config(format!("stem extents must be positive: {self:?}")));
        }
        match self.kind {
            StemKind::ConvStem => {
                if self.in_height % 4 != 0 || self.in_width % 4 != 0 {
                    return Err(Error::config(format!(
                        "conv stem downsamples by 4; {}x{} frames do not divide",
                        self.in_height, self.in_width
                    )));
                }
            }
            StemKind::LinearPatch { patch } => {
                if patch == 0 || self.in_height % patch != 0 || self.in_width % patch != 0 {
                    return Err(Error::config(format!(
                        "patch size {patch} does not tile {}x{} frames",
                        self.in_height, self.in_width
                    )));
                }
            }
            StemKind::Precomputed => {
                if self.channels != self.in_channels {
                    return Err(Error::config(format!(
                        "precomputed features carry {} channels but the stem declares {}",
                        self.in_channels, self.channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Output feature grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        let down = match self.kind {
            StemKind::ConvStem => 4,
            StemKind::LinearPatch { patch } => patch,
            StemKind::Precomputed => 1,
        };
        (self.in_height / down, self.in_width / down)
    }

    pub fn patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Window geometry, input width and output width of each stem layer.
    pub fn layers(&self) -> Vec<(UnfoldSpec, usize, usize)> {
        let conv = UnfoldSpec {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        match self.kind {
            StemKind::ConvStem => vec![
                (conv, 9 * self.in_channels, self.channels),
                (conv, 9 * self.channels, self.channels),
            ],
            StemKind::LinearPatch { patch } => vec![(
                UnfoldSpec {
                    kernel: patch,
                    stride: patch,
                    padding: 0,
                },
                patch * patch * self.in_channels,
                self.channels,
            )],
            StemKind::Precomputed => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemLayer<T> {
    /// `[window_features, out_channels]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams<T> {
    pub layers: Vec<StemLayer<T>>,
}

impl<T: Real> StemParams<T> {
    /// LeCun-normal weights (`std = 1/sqrt(fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &StemConfig, rng: &mut R) -> Self {
        let layers = cfg
            .layers()
            .into_iter()
            .map(|(_, fan_in, out)| StemLayer {
                weight: Tensor::randn([fan_in, out], 1.0 / (fan_in as f64).sqrt(), rng),
                bias: Tensor::zeros([out]),
            })
            .collect();
        Self { layers }
    }
}

/// Learnable spatial and temporal positional embeddings plus the
/// classification token.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbeddings<T> {
    /// `[P, d]`, shared by every frame slot.
    pub space: Tensor<T>,
    /// `[F+1, d]`, shared by every spatial position.
    pub time: Tensor<T>,
    /// `[d]`, replicated over all positions of slot 0.
    pub cls: Tensor<T>,
}

impl<T: Real> PositionalEmbeddings<T> {
    pub fn init<R: Rng + ?Sized>(patches: usize, frames: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            space: Tensor::randn([patches, dim], POS_INIT_STD, rng),
            time: Tensor::randn([frames + 1, dim], POS_INIT_STD, rng),
            cls: Tensor::randn([dim], INIT_STD, rng),
        }
    }

    pub fn zeros(patches: usize, frames: usize, dim: usize) -> Self {
        Self {
            space: Tensor::zeros([patches, dim]),
            time: Tensor::zeros([frames + 1, dim]),
            cls: Tensor::zeros([dim]),
        }
    }
}

/// Graph handles for the stem layers.
#[derive(Debug, Clone)]
pub struct StemVars {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct PositionalVars {
    pub space: Var,
    pub time: Var,
    pub cls: Var,
}

/// Per-frame features `[B, F, H, W, C]` from raw frames `[B, F, H0, W0, C_in]`.
///
/// Frames are processed independently, so identical frames give identical
/// grids regardless of their position in the clip.
pub fn stem_forward<T: Real>(g: &mut Graph<T>, frames: Var, cfg: &StemConfig, vars: &StemVars) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(frames).to_vec();
    let expected = [cfg.in_height, cfg.in_width, cfg.in_channels];
    if shape.len() != 5 || shape[2..] != expected {
        return Err(Error::config(format!(
            "stem expects frames [B, F, {}, {}, {}], got {shape:?}",
            expected[0], expected[1], expected[2]
        )));
    }
    let layers = cfg.layers();
    if layers.len() != vars.layers.len() {
        return Err(Error::config("stem parameters do not match the stem kind"));
    }
    if layers.is_empty() {
        return Ok(frames);
    }
    let (b, f) = (shape[0], shape[1]);
    let mut x = g.reshape(frames, &[b * f, cfg.in_height, cfg.in_width, cfg.in_channels])?;
    for (i, ((spec, _, _), &(w, bias))) in layers.iter().zip(&vars.layers).enumerate() {
        if i > 0 {
            x = g.gelu(x);
        }
        let cols = g.unfold(x, *spec)?;
        let y = g.linear(cols, w)?;
        x = g.add_trailing(y, bias)?;
    }
    let (h, w) = cfg.grid();
    Ok(g.reshape(x, &[b, f, h, w, cfg.channels])?)
}

/// Flatten each frame's grid in row-major order and apply the shared
/// `C -> d` projection: `[B, F, H, W, C] -> [B, F, H*W, d]`.
pub fn tokenize_project<T: Real>(g: &mut Graph<T>, features: Var, w_proj: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 5 {
        return Err(Error::config(format!("expected features [B,F,H,W,C], got {s:?}")));
    }
    if g.shape(w_proj).len() != 2 || g.shape(w_proj)[0] != s[4] {
        return Err(crate::tensor::TensorError::Shape {
            op: "tokenize_project",
            lhs: s,
            rhs: g.shape(w_proj).to_vec(),
        }
        .into());
    }
    let flat = g.reshape(features, &[s[0], s[1], s[2] * s[3], s[4]])?;
    Ok(g.linear(flat, w_proj)?)
}

/// Build the transformer input `[B, P, F+1, d]` from projected tokens
/// `[B, F, P, d]`.
///
/// Adds the spatial embedding to every frame, prepends the classification
/// token (the same vector at every spatial position) as slot 0, moves the
/// temporal axis inside the spatial one and, when `with_time` is set, adds
/// the temporal embedding to every position.
pub fn assemble_input<T: Real>(g: &mut Graph<T>, tokens: Var, pos: &PositionalVars, with_time: bool) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 4 {
        return Err(Error::config(format!("expected tokens [B,F,P,d], got {s:?}")));
    }
    let (b, f, p, d) = (s[0], s[1], s[2], s[3]);
    if g.shape(pos.space) != [p, d] || g.shape(pos.time) != [f + 1, d] || g.shape(pos.cls) != [d] {
        return Err(Error::config(format!(
            "positional embeddings {:?}/{:?}/{:?} do not fit tokens {s:?}",
            g.shape(pos.space),
            g.shape(pos.time),
            g.shape(pos.cls)
        )));
    }
    let with_space = g.add_trailing(tokens, pos.space)?;
    let cls = g.expand(pos.cls, &[b, 1, p, d])?;
    let slots = g.concat(&[cls, with_space], 1)?;
    let grid = g.permute(slots, &[0, 2, 1, 3])?;
    if with_time {
        Ok(g.add_trailing(grid, pos.time)?)
    } else {
        Ok(grid)
    }
}
