use super::{Init, Linear, LinearInit, NnError, ParamId, ParamKind, ParamStore, Result, Session};
use crate::tensor::{TensorError, Var};

const POS_STD: f64 = 0.02;

/// Splits frames into non-overlapping `P×P` patches and embeds each one.
///
/// Input is `[B, C, H, W]`; output is `[B, S, d]` with `S = (H/P)·(W/P)`,
/// patches in row-major order.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Linear,
    pos: ParamId,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
    dim: usize,
}

impl PatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        dim: usize,
    ) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(NnError::Config(format!(
                "frame {height}x{width} is not divisible into {patch}x{patch} patches"
            )));
        }
        let proj = Linear::new(
            store,
            init,
            &format!("{name}.proj"),
            channels * patch * patch,
            dim,
            true,
            LinearInit::TruncNormal(POS_STD),
        )?;
        let tokens = (height / patch) * (width / patch);
        let pos = store.add(
            format!("{name}.pos"),
            init.trunc_normal(&[tokens, dim], POS_STD),
            ParamKind::Trainable,
        )?;
        Ok(Self {
            proj,
            pos,
            channels,
            height,
            width,
            patch,
            dim,
        })
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.num_patches() * self.dim
    }

    /// Patch tokens without position embeddings.
    pub fn project<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (c, h, w, p) = (self.channels, self.height, self.width, self.patch);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(NnError::Tensor(TensorError::Dimension {
                op: "patch_embed",
                detail: format!("expected [B, {c}, {h}, {w}], got {shape:?}"),
            }));
        }
        let b = shape[0];
        let (gh, gw) = (h / p, w / p);
        let patches = x
            .reshape([b, c, gh, p, gw, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape([b, gh * gw, c * p * p])?;
        self.proj.forward(s, patches)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.project(s, x)?.add(s.param(self.pos))?)
    }
}
