use serde::{Deserialize, Serialize};

use super::{InputShape, ModelError, Result};
use crate::nn::{
    BatchNorm, Conv2Plus1d, Conv2Plus1dConfig, Conv3d, Init, Linear, LinearInit, ParamStore, Session,
};
use crate::tensor::{Conv3dSpec, Var};

const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const HEAD_STD: f64 = 0.02;

/// ResNet-18 skeleton with every 3D convolution replaced by a (2+1)D pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R2Plus1DConfig {
    /// Scales the 64/128/256/512 stage widths; one of 1, 1/2, 1/4, 1/8.
    pub width_multiplier: f64,
    pub blocks: [usize; 4],
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub stem_spatial_kernel: usize,
    /// ReLU between the spatial and temporal stage of each factorised conv.
    pub inter_relu: bool,
}

impl Default for R2Plus1DConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            blocks: [2, 2, 2, 2],
            temporal_kernel: 3,
            spatial_kernel: 3,
            stem_spatial_kernel: 7,
            inter_relu: true,
        }
    }
}

impl R2Plus1DConfig {
    pub fn widths(&self) -> Result<[usize; 4]> {
        let divisor = match self.width_multiplier {
            m if m == 1.0 => 1,
            m if m == 0.5 => 2,
            m if m == 0.25 => 4,
            m if m == 0.125 => 8,
            m => {
                return Err(ModelError::Config(format!(
                    "width multiplier must be one of 1, 0.5, 0.25, 0.125; got {m}"
                )))
            }
        };
        Ok(BASE_WIDTHS.map(|w| w / divisor))
    }

    pub fn validate(&self, input: &InputShape) -> Result<()> {
        self.widths()?;
        if self.blocks.contains(&0) {
            return Err(ModelError::Config(format!("every stage needs a block, got {:?}", self.blocks)));
        }
        for k in [self.temporal_kernel, self.spatial_kernel, self.stem_spatial_kernel] {
            if k % 2 == 0 {
                return Err(ModelError::Config(format!("kernel extents must be odd, got {k}")));
            }
        }
        let stride = self.cumulative_spatial_stride();
        if input.height % stride != 0 || input.width % stride != 0 {
            return Err(ModelError::Config(format!(
                "resolution {}x{} is not divisible by the cumulative stride {stride}",
                input.height, input.width
            )));
        }
        Ok(())
    }

    /// Stem stride 2 times stride 2 in stages 2 to 4.
    pub fn cumulative_spatial_stride(&self) -> usize {
        16
    }
}

#[derive(Debug, Clone)]
struct Shortcut {
    conv: Conv3d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2Plus1d,
    bn1: BatchNorm,
    conv2: Conv2Plus1d,
    bn2: BatchNorm,
    shortcut: Option<Shortcut>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &R2Plus1DConfig,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv = |cin, stride| Conv2Plus1dConfig {
            inter_relu: cfg.inter_relu,
            temporal_kernel: cfg.temporal_kernel,
            spatial_kernel: cfg.spatial_kernel,
            temporal_padding: cfg.temporal_kernel / 2,
            spatial_padding: cfg.spatial_kernel / 2,
            ..Conv2Plus1dConfig::cubic(cin, cout, 3, stride, 1)
        };
        let shortcut = if stride != 1 || cin != cout {
            Some(Shortcut {
                conv: Conv3d::new(
                    store,
                    init,
                    &format!("{name}.down.conv"),
                    cin,
                    cout,
                    [1, 1, 1],
                    Conv3dSpec::new([stride; 3], [0; 3]),
                )?,
                bn: BatchNorm::new(store, &format!("{name}.down.bn"), cout)?,
            })
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2Plus1d::new(store, init, &format!("{name}.conv1"), conv(cin, stride))?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv2Plus1d::new(store, init, &format!("{name}.conv2"), conv(cout, 1))?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout)?,
            shortcut,
        })
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self
                .shortcut
                .as_ref()
                .map_or(0, |s| s.conv.param_count() + s.bn.param_count())
    }

    fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.bn1.forward(s, self.conv1.forward(s, x)?)?.relu();
        let h = self.bn2.forward(s, self.conv2.forward(s, h)?)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.bn.forward(s, sc.conv.forward(s, x)?)?,
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct R2Plus1D {
    stem: Conv2Plus1d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
    input: InputShape,
}

impl R2Plus1D {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &R2Plus1DConfig, input: InputShape) -> Result<Self> {
        cfg.validate(&input)?;
        let widths = cfg.widths()?;
        let stem = Conv2Plus1d::new(
            store,
            init,
            "stem.conv",
            Conv2Plus1dConfig {
                in_channels: input.channels,
                out_channels: widths[0],
                temporal_kernel: cfg.temporal_kernel,
                spatial_kernel: cfg.stem_spatial_kernel,
                temporal_stride: 1,
                spatial_stride: 2,
                temporal_padding: cfg.temporal_kernel / 2,
                spatial_padding: cfg.stem_spatial_kernel / 2,
                inter_relu: cfg.inter_relu,
            },
        )?;
        let stem_bn = BatchNorm::new(store, "stem.bn", widths[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (i, (&cout, &n)) in widths.iter().zip(&cfg.blocks).enumerate() {
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    store,
                    init,
                    &format!("stage{}.block{b}", i + 1),
                    cfg,
                    cin,
                    cout,
                    stride,
                )?);
                cin = cout;
            }
            stages.push(blocks);
        }
        let head = Linear::new(store, init, "head", cin, 1, true, LinearInit::TruncNormal(HEAD_STD))?;
        Ok(Self {
            stem,
            stem_bn,
            stages,
            head,
            input,
        })
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stem_bn.param_count()
            + self
                .stages
                .iter()
                .flatten()
                .map(BasicBlock::param_count)
                .sum::<usize>()
            + self.head.param_count()
    }

    /// Every (2+1)D convolution in the network, for parity audits.
    pub fn factorised_convs(&self) -> Vec<&Conv2Plus1d> {
        let mut out = vec![&self.stem];
        for b in self.stages.iter().flatten() {
            out.push(&b.conv1);
            out.push(&b.conv2);
        }
        out
    }

    /// `[N, C, T, H, W]` to probabilities `[N]`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.input.check(&x.shape())?;
        let n = x.shape()[0];
        let mut h = self.stem_bn.forward(s, self.stem.forward(s, x)?)?.relu();
        for b in self.stages.iter().flatten() {
            h = b.forward(s, h)?;
        }
        let shape = h.shape();
        let c = shape[1];
        let pooled = h.reshape([n, c, shape[2..].iter().product()])?.mean_axis(2)?;
        Ok(self.head.forward(s, pooled)?.reshape([n])?.sigmoid())
    }
}
