use super::{Init, NnError, ParamId, ParamKind, ParamStore, Result, Session};
use crate::tensor::{Conv3dSpec, Var};

/// Bias-free 3D convolution, weight `[C_out×C_in×kt×kh×kw]`, He-normal
/// initialised over the output fan.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: ParamId,
    kernel: [usize; 3],
    in_channels: usize,
    out_channels: usize,
    spec: Conv3dSpec,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.contains(&0) || spec.stride.contains(&0) {
            return Err(NnError::Config(format!(
                "conv `{name}`: degenerate geometry {in_channels}→{out_channels}, kernel {kernel:?}, {spec:?}"
            )));
        }
        let fan_out = out_channels * kernel.iter().product::<usize>();
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let weight = store.add(
            format!("{name}.weight"),
            init.kaiming_normal(&shape, fan_out),
            ParamKind::Trainable,
        )?;
        Ok(Self {
            weight,
            kernel,
            in_channels,
            out_channels,
            spec,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.iter().product::<usize>()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        self.spec.output_dims(input, self.kernel)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv3d(s.param(self.weight), self.spec)?)
    }
}

/// Intermediate width that makes a (2+1)D factorisation carry as many
/// weights as the full `t×d×d` convolution it replaces:
/// `floor(t·d²·C_in·C_out / (d²·C_in + t·C_out))`.
pub fn mid_channels(t: usize, d: usize, in_channels: usize, out_channels: usize) -> Result<usize> {
    let num = t * d * d * in_channels * out_channels;
    let den = d * d * in_channels + t * out_channels;
    let m = if den == 0 { 0 } else { num / den };
    if m == 0 {
        return Err(NnError::Config(format!(
            "(2+1)D factorisation of {in_channels}→{out_channels} with t={t}, d={d} leaves no intermediate channels"
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2Plus1dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub temporal_padding: usize,
    pub spatial_padding: usize,
    /// ReLU between the spatial and temporal stages.
    pub inter_relu: bool,
}

impl Conv2Plus1dConfig {
    /// Same kernel extent, stride and padding along all three axes.
    pub fn cubic(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            temporal_kernel: kernel,
            spatial_kernel: kernel,
            temporal_stride: stride,
            spatial_stride: stride,
            temporal_padding: padding,
            spatial_padding: padding,
            inter_relu: true,
        }
    }

    pub fn mid_channels(&self) -> Result<usize> {
        mid_channels(
            self.temporal_kernel,
            self.spatial_kernel,
            self.in_channels,
            self.out_channels,
        )
    }

    /// Weights of the full 3D convolution with the same extents.
    pub fn full_3d_params(&self) -> usize {
        self.temporal_kernel * self.spatial_kernel * self.spatial_kernel * self.in_channels * self.out_channels
    }

    /// Output (T, H, W) of the equivalent full 3D convolution.
    pub fn full_3d_output(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        Conv3dSpec::new(
            [self.temporal_stride, self.spatial_stride, self.spatial_stride],
            [self.temporal_padding, self.spatial_padding, self.spatial_padding],
        )
        .output_dims(
            input,
            [self.temporal_kernel, self.spatial_kernel, self.spatial_kernel],
        )
    }
}

/// Spatial `1×d×d` convolution into `M` channels followed by a temporal
/// `t×1×1` convolution into `C_out`.
#[derive(Debug, Clone)]
pub struct Conv2Plus1d {
    spatial: Conv3d,
    temporal: Conv3d,
    config: Conv2Plus1dConfig,
    mid: usize,
}

impl Conv2Plus1d {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: Conv2Plus1dConfig) -> Result<Self> {
        let (t, d) = (config.temporal_kernel, config.spatial_kernel);
        if t % 2 == 0 || d % 2 == 0 {
            return Err(NnError::Config(format!(
                "(2+1)D conv `{name}` needs odd kernel extents, got t={t}, d={d}"
            )));
        }
        let mid = config.mid_channels()?;
        let spatial = Conv3d::new(
            store,
            init,
            &format!("{name}.spatial"),
            config.in_channels,
            mid,
            [1, d, d],
            Conv3dSpec::new(
                [1, config.spatial_stride, config.spatial_stride],
                [0, config.spatial_padding, config.spatial_padding],
            ),
        )?;
        let temporal = Conv3d::new(
            store,
            init,
            &format!("{name}.temporal"),
            mid,
            config.out_channels,
            [t, 1, 1],
            Conv3dSpec::new([config.temporal_stride, 1, 1], [config.temporal_padding, 0, 0]),
        )?;
        Ok(Self {
            spatial,
            temporal,
            config,
            mid,
        })
    }

    pub fn config(&self) -> &Conv2Plus1dConfig {
        &self.config
    }

    pub fn mid(&self) -> usize {
        self.mid
    }

    pub fn spatial(&self) -> &Conv3d {
        &self.spatial
    }

    pub fn temporal(&self) -> &Conv3d {
        &self.temporal
    }

    pub fn param_count(&self) -> usize {
        self.spatial.param_count() + self.temporal.param_count()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        self.temporal.output_dims(self.spatial.output_dims(input)?)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.spatial.forward(s, x)?;
        if self.config.inter_relu {
            h = h.relu();
        }
        self.temporal.forward(s, h)
    }
}
