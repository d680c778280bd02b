use serde::{Deserialize, Serialize};

use super::{InputShape, ModelError, Result};
use crate::nn::{
    AttentionConfig, Dropout, Encoder, Init, Linear, LinearInit, ParamId, ParamKind, ParamStore, PatchEmbed,
    Session,
};
use crate::tensor::Var;

const TOKEN_STD: f64 = 0.02;
/// Fixed pixel standardisation applied before patch embedding. Clip pixels
/// lie in [0, 1]; without centring, the shared mean dominates every patch
/// token and the LayerNorm'd tokens become nearly identical across clips.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Factorised-encoder video transformer: a spatial encoder over each frame's
/// patches, then a temporal encoder over the per-frame CLS outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViViTConfig {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_depth")]
    pub spatial_depth: usize,
    #[serde(default = "default_depth")]
    pub temporal_depth: usize,
    pub patch: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Classifier hidden width; the model width when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Dropout before the classifier's output projection.
    #[serde(default)]
    pub dropout: f64,
}

fn default_depth() -> usize {
    2
}

fn default_mlp_ratio() -> usize {
    4
}

impl ViViTConfig {
    pub fn new(dim: usize, heads: usize, head_dim: usize, patch: usize) -> Self {
        Self {
            dim,
            heads,
            head_dim,
            spatial_depth: 2,
            temporal_depth: 2,
            patch,
            mlp_ratio: 4,
            hidden: None,
            dropout: 0.0,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.dim)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.dim, self.heads, self.head_dim)?)
    }

    pub fn validate(&self, input: &InputShape) -> Result<()> {
        self.attention()?;
        if self.spatial_depth == 0 || self.temporal_depth == 0 {
            return Err(ModelError::Config("both encoders need at least one block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.hidden_width() == 0 {
            return Err(ModelError::Config("classifier hidden width must be positive".into()));
        }
        let p = self.patch;
        if p == 0 || input.height % p != 0 || input.width % p != 0 {
            return Err(ModelError::Config(format!(
                "frame {}x{} is not divisible into {p}x{p} patches",
                input.height, input.width
            )));
        }
        Ok(())
    }

    /// Spatial tokens per frame including CLS.
    pub fn spatial_seq_len(&self, input: &InputShape) -> usize {
        (input.height / self.patch) * (input.width / self.patch) + 1
    }

    /// Temporal tokens including CLS.
    pub fn temporal_seq_len(&self, input: &InputShape) -> usize {
        input.frames + 1
    }
}

#[derive(Debug, Clone)]
pub struct ViViT {
    patch: PatchEmbed,
    spatial_cls: ParamId,
    spatial: Encoder,
    temporal_pos: ParamId,
    temporal_cls: ParamId,
    temporal: Encoder,
    fc1: Linear,
    dropout: Dropout,
    fc2: Linear,
    input: InputShape,
    dim: usize,
}

impl ViViT {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ViViTConfig, input: InputShape) -> Result<Self> {
        cfg.validate(&input)?;
        let d = cfg.dim;
        let attn = cfg.attention()?;
        let patch = PatchEmbed::new(store, init, "patch", input.channels, input.height, input.width, cfg.patch, d)?;
        let spatial_cls = store.add("spatial.cls", init.trunc_normal(&[1, d], TOKEN_STD), ParamKind::Trainable)?;
        let spatial = Encoder::new(store, init, "spatial", attn, cfg.spatial_depth, cfg.mlp_ratio)?;
        let temporal_pos = store.add(
            "temporal.pos",
            init.trunc_normal(&[input.frames, d], TOKEN_STD),
            ParamKind::Trainable,
        )?;
        let temporal_cls = store.add("temporal.cls", init.trunc_normal(&[1, d], TOKEN_STD), ParamKind::Trainable)?;
        let temporal = Encoder::new(store, init, "temporal", attn, cfg.temporal_depth, cfg.mlp_ratio)?;
        let hidden = cfg.hidden_width();
        let fc1 = Linear::new(store, init, "head.fc1", d, hidden, true, LinearInit::TruncNormal(TOKEN_STD))?;
        let fc2 = Linear::new(store, init, "head.fc2", hidden, 1, true, LinearInit::TruncNormal(TOKEN_STD))?;
        Ok(Self {
            patch,
            spatial_cls,
            spatial,
            temporal_pos,
            temporal_cls,
            temporal,
            fc1,
            dropout: Dropout::new(cfg.dropout)?,
            fc2,
            input,
            dim: d,
        })
    }

    pub fn param_count(&self) -> usize {
        let tokens = 2 * self.dim + self.input.frames * self.dim;
        self.patch.param_count()
            + self.spatial.param_count()
            + self.temporal.param_count()
            + tokens
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    pub fn inject_attention_fault(&mut self) {
        self.spatial.inject_attention_fault();
        self.temporal.inject_attention_fault();
    }

    /// Per-frame CLS outputs of the spatial encoder, `[N, T, d]`, before the
    /// temporal position embedding.
    pub fn frame_tokens<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.input.check(&x.shape())?;
        let InputShape {
            channels: c,
            frames: t,
            height: h,
            width: w,
        } = self.input;
        let n = x.shape()[0];
        let frames = x
            .add_scalar(-PIXEL_MEAN)
            .scale(1.0 / PIXEL_STD)
            .permute(&[0, 2, 1, 3, 4])?
            .reshape([n * t, c, h, w])?;
        let tokens = self.patch.forward(s, frames)?;
        let cls = s.param(self.spatial_cls).expand_leading(n * t)?;
        let seq = Var::concat(&[cls, tokens], 1)?;
        let encoded = self.spatial.forward(s, seq)?;
        Ok(encoded.narrow(1, 0, 1)?.reshape([n, t, self.dim])?)
    }

    /// `[N, C, T, H, W]` to probabilities `[N]`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let frames = self.frame_tokens(s, x)?;
        let n = frames.shape()[0];
        let frames = frames.add(s.param(self.temporal_pos))?;
        let cls = s.param(self.temporal_cls).expand_leading(n)?;
        let seq = Var::concat(&[cls, frames], 1)?;
        let video = self
            .temporal
            .forward(s, seq)?
            .narrow(1, 0, 1)?
            .reshape([n, self.dim])?;
        let h = self.fc1.forward(s, video)?.gelu();
        let h = self.dropout.forward(s, h)?;
        Ok(self.fc2.forward(s, h)?.reshape([n])?.sigmoid())
    }
}
