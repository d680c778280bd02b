use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::BackwardArgs;
use super::{dim_err, Result, Tensor, Var};

/// Stride and zero padding of a 3D convolution, ordered (time, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }

    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            out[i] = Self::out_extent(input[i], kernel[i], self.stride[i], self.padding[i])?;
        }
        Some(out)
    }
}

struct Geometry {
    c: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    fn p(&self) -> usize {
        self.out.iter().product()
    }

    /// Visits every (column-matrix index, input index) pair that is in bounds.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [to, ho, wo] = self.out;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let p = self.p();
        for c in 0..self.c {
            for a in 0..kt {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kt + a) * kh + b) * kw + e;
                        for ot in 0..to {
                            let it = (ot * st + a) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh + b) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let col_base = row * p + (ot * ho + oh) * wo;
                                let in_base = ((c * t + it as usize) * h + ih as usize) * w;
                                for ow in 0..wo {
                                    let iw = (ow * sw + e) as isize - pw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    f(col_base + ow, in_base + iw as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, sample: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.k() * self.p()];
        self.for_each_tap(|ci, xi| cols[ci] = sample[xi]);
        cols
    }

    fn col2im(&self, cols: &[f64], sample_grad: &mut [f64]) {
        self.for_each_tap(|ci, xi| sample_grad[xi] += cols[ci]);
    }
}

impl<'t> Var<'t> {
    /// 3D convolution without bias.
    ///
    /// `self` is `[N×C×T×H×W]`, `weight` is `[C_out×C×kt×kh×kw]`.
    pub fn conv3d(self, weight: Var<'t>, spec: Conv3dSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        if x.rank() != 5 || w.rank() != 5 || x.shape()[1] != w.shape()[1] {
            return Err(dim_err(
                "conv3d",
                format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
            ));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let co = w.shape()[0];
        let input = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let kernel = [w.shape()[2], w.shape()[3], w.shape()[4]];
        let out = spec.output_dims(input, kernel).ok_or_else(|| {
            dim_err(
                "conv3d",
                format!("kernel {kernel:?} does not fit input {input:?} with {spec:?}"),
            )
        })?;
        let geo = Geometry {
            c,
            input,
            kernel,
            out,
            spec,
        };
        let (k, p) = (geo.k(), geo.p());
        let sample_len = c * input.iter().product::<usize>();
        let mut y = vec![0.0; n * co * p];
        for b in 0..n {
            let cols = geo.im2col(&x.data()[b * sample_len..(b + 1) * sample_len]);
            gemm_nn(w.data(), &cols, &mut y[b * co * p..(b + 1) * co * p], co, k, p);
        }
        let out_shape = vec![n, co, out[0], out[1], out[2]];
        Ok(self.tape().push(
            "conv3d",
            Tensor::from_parts(out_shape, y),
            &[self, weight],
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.inputs[0].data();
                let w = args.inputs[1].data();
                let g = args.grad.data();
                let mut gx = args.needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = args.needs[1].then(|| vec![0.0; w.len()]);
                for b in 0..n {
                    let gb = &g[b * co * p..(b + 1) * co * p];
                    if let Some(gw) = gw.as_mut() {
                        let cols = geo.im2col(&x[b * sample_len..(b + 1) * sample_len]);
                        gemm_nt(gb, &cols, gw, co, p, k);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut dcols = vec![0.0; k * p];
                        gemm_tn(w, gb, &mut dcols, k, co, p);
                        geo.col2im(&dcols, &mut gx[b * sample_len..(b + 1) * sample_len]);
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_parts(args.inputs[0].shape().to_vec(), d)),
                    gw.map(|d| Tensor::from_parts(args.inputs[1].shape().to_vec(), d)),
                ]
            }),
        ))
    }
}
