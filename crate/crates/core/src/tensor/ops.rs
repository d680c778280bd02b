use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::BackwardArgs;
use super::{dim_err, numel, strides, Result, Tensor, Var};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

/// Leading repeat count when `small` broadcasts as a suffix of `big`.
fn suffix_repeats(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    let trimmed: Vec<usize> = small
        .iter()
        .copied()
        .skip_while(|&d| d == 1)
        .collect::<Vec<_>>();
    let trimmed = if trimmed.is_empty() { vec![1] } else { trimmed };
    let fits = big == small
        || (trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == trimmed[..])
        || numel(small) == 1;
    if !fits {
        return Err(dim_err(
            op,
            format!("cannot broadcast {small:?} against {big:?}"),
        ));
    }
    Ok(numel(big) / numel(small))
}

/// Sums a gradient of shape `big` down onto a suffix-broadcast operand.
fn reduce_to_suffix(g: &Tensor, small_shape: &[usize]) -> Tensor {
    let n = numel(small_shape);
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(small_shape.to_vec(), out)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let a = self.value();
        let b = other.value();
        suffix_repeats(op, a.shape(), b.shape())?;
        let nb = b.numel();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b.data()[i % nb];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape().push(
            op,
            out,
            &[self, other],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad;
                let (a, b) = (args.inputs[0], args.inputs[1]);
                let nb = b.numel();
                let ga = args.needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * b.data()[i % nb])
                            .collect(),
                    ),
                });
                let gb = args.needs[1].then(|| {
                    let full = match kind {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.map(|v| -v),
                        Binary::Mul => Tensor::from_parts(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(a.data())
                                .map(|(gv, av)| gv * av)
                                .collect(),
                        ),
                    };
                    reduce_to_suffix(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; `other` may broadcast as a trailing-dimension suffix.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(self, factor: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != factor.shape() {
            return Err(dim_err(
                "mul_const",
                format!("{:?} vs {:?}", x.shape(), factor.shape()),
            ));
        }
        let f = factor.clone();
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(f.data()).map(|(a, b)| a * b).collect(),
        );
        Ok(self.tape().push(
            "mul_const",
            out,
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| {
                vec![Some(Tensor::from_parts(
                    args.grad.shape().to_vec(),
                    args.grad
                        .data()
                        .iter()
                        .zip(f.data())
                        .map(|(g, m)| g * m)
                        .collect(),
                ))]
            }),
        ))
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let out = self.value().map(f);
        self.tape().push(
            op,
            out,
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let data = args
                    .grad
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            "relu",
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    /// Identity whose backward rule negates the gradient. Used only to inject
    /// faults that the gradient checker must catch.
    pub fn grad_sign_flip(self) -> Var<'t> {
        self.unary("grad_sign_flip", |x| x, |_, _| -1.0)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        self.tape().push(
            "sum",
            out,
            &[self],
            Box::new(|args: &BackwardArgs<'_>| {
                let g = args.grad.data()[0];
                vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape (a rank-1 input yields `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.tape().push(
            "sum_axis",
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), gx))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err(
                "matmul",
                format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut c, m, k, n);
        Ok(self.tape().push(
            "matmul",
            Tensor::from_parts(vec![m, n], c),
            &[self, other],
            Box::new(move |args: &BackwardArgs<'_>| {
                let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
                let ga = args.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(g.data(), b.data(), &mut d, m, n, k);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = args.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(a.data(), g.data(), &mut d, k, m, n);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched matrix product of `[b×m×k]` and `[b×k×n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 3
            || b.rank() != 3
            || a.shape()[0] != b.shape()[0]
            || a.shape()[2] != b.shape()[1]
        {
            return Err(dim_err(
                "bmm",
                format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
            ));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.tape().push(
            "bmm",
            Tensor::from_parts(vec![bs, m, n], c),
            &[self, other],
            Box::new(move |args: &BackwardArgs<'_>| {
                let (a, b, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let ga = args.needs[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &b[i * k * n..(i + 1) * k * n],
                            &mut d[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::from_parts(vec![bs, m, k], d)
                });
                let gb = args.needs[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn(
                            &a[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut d[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    Tensor::from_parts(vec![bs, k, n], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        Ok(self.tape().push(
            "reshape",
            out,
            &[self],
            Box::new(|args: &BackwardArgs<'_>| {
                vec![Some(
                    args.grad
                        .reshape(args.inputs[0].shape().to_vec())
                        .expect("reshape grad keeps element count"),
                )]
            }),
        ))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`. Materializes.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().push(
            "permute",
            out,
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| vec![Some(permute_tensor(args.grad, &inverse))]),
        ))
    }

    /// Takes `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        let (outer, full, inner) = split_axis(x.shape(), axis);
        if len == 0 || start + len > full {
            return Err(dim_err(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape().push(
            "narrow",
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), gx))]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let tape = first.tape();
        let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(tape.push(
            "concat",
            Tensor::from_parts(shape, out),
            parts,
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut offset = o * total * inner;
                    for (gv, &l) in grads.iter_mut().zip(&lens) {
                        gv.extend_from_slice(&g[offset..offset + l * inner]);
                        offset += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&args.inputs)
                    .zip(&args.needs)
                    .map(|((gv, x), &need)| {
                        need.then(|| Tensor::from_parts(x.shape().to_vec(), gv))
                    })
                    .collect()
            }),
        ))
    }

    /// Repeats the value `n` times along a new leading axis.
    pub fn expand_leading(self, n: usize) -> Result<Var<'t>> {
        if n == 0 {
            return Err(dim_err("expand_leading", "repeat count must be positive"));
        }
        let x = self.value();
        let mut data = Vec::with_capacity(n * x.numel());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        Ok(self.tape().push(
            "expand_leading",
            Tensor::from_parts(shape, data),
            &[self],
            Box::new(|args: &BackwardArgs<'_>| {
                vec![Some(reduce_to_suffix(args.grad, args.inputs[0].shape()))]
            }),
        ))
    }

    /// Exp-normalizes along `axis` after subtracting the per-slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| xd[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (xd[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        Ok(self.tape().push(
            "softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| {
                let y = args.output.data();
                let g = args.grad.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let inner_prod: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (g[idx(l)] - inner_prod);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(args.output.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta` (both shaped like the last axis).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().expect("tensors have rank >= 1");
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "scale {:?} / shift {:?} must be [{d}] for input {:?}",
                    gv.shape(),
                    bv.shape(),
                    x.shape()
                ),
            ));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.tape().push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, gamma, beta],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::from_parts(args.inputs[0].shape().to_vec(), gx)),
                    args.needs[1].then(|| Tensor::from_parts(vec![d], ggamma)),
                    args.needs[2].then(|| Tensor::from_parts(vec![d], gbeta)),
                ]
            }),
        ))
    }

    /// Batch normalization over axis 1 using the statistics of this batch.
    ///
    /// Returns the output together with the per-channel batch mean and biased
    /// batch variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        let (n, c, l) = channel_layout("batch_norm", x.shape(), &gamma.value(), &beta.value())?;
        let count = (n * l) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[(b * c + ch) * l..(b * c + ch + 1) * l].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for b in 0..n {
                v += xd[(b * c + ch) * l..(b * c + ch + 1) * l]
                    .iter()
                    .map(|x| (x - m) * (x - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..l {
                    let idx = (b * c + ch) * l + i;
                    let h = (xd[idx] - mean[ch]) * rstd[ch];
                    xhat[idx] = h;
                    out[idx] = h * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let var_out = self.tape().push(
            "batch_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, gamma, beta],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut mean_dh = vec![0.0; c];
                let mut mean_dh_h = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..l {
                            let idx = (b * c + ch) * l + i;
                            let dh = g[idx] * gamma[ch];
                            mean_dh[ch] += dh;
                            mean_dh_h[ch] += dh * xhat[idx];
                            ggamma[ch] += g[idx] * xhat[idx];
                            gbeta[ch] += g[idx];
                        }
                    }
                }
                for ch in 0..c {
                    mean_dh[ch] /= count;
                    mean_dh_h[ch] /= count;
                }
                let gx = args.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in 0..l {
                                let idx = (b * c + ch) * l + i;
                                let dh = g[idx] * gamma[ch];
                                gx[idx] = rstd[ch] * (dh - mean_dh[ch] - xhat[idx] * mean_dh_h[ch]);
                            }
                        }
                    }
                    Tensor::from_parts(args.inputs[0].shape().to_vec(), gx)
                });
                vec![
                    gx,
                    args.needs[1].then(|| Tensor::from_parts(vec![c], ggamma)),
                    args.needs[2].then(|| Tensor::from_parts(vec![c], gbeta)),
                ]
            }),
        );
        Ok((var_out, mean, var))
    }

    /// Batch normalization over axis 1 with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, l) = channel_layout("batch_norm", x.shape(), &gamma.value(), &beta.value())?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err("batch_norm", "running statistics do not match channels"));
        }
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (gv, bv) = (gamma.value(), beta.value());
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..l {
                    let idx = (b * c + ch) * l + i;
                    out[idx] = (xd[idx] - mean[ch]) * rstd[ch] * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        Ok(self.tape().push(
            "batch_norm_eval",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, gamma, beta],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data();
                let xd = args.inputs[0].data();
                let gamma = args.inputs[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..l {
                            let idx = (b * c + ch) * l + i;
                            let h = (xd[idx] - mean[ch]) * rstd[ch];
                            gx[idx] = g[idx] * gamma[ch] * rstd[ch];
                            ggamma[ch] += g[idx] * h;
                            gbeta[ch] += g[idx];
                        }
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::from_parts(args.inputs[0].shape().to_vec(), gx)),
                    args.needs[1].then(|| Tensor::from_parts(vec![c], ggamma)),
                    args.needs[2].then(|| Tensor::from_parts(vec![c], gbeta)),
                ]
            }),
        ))
    }
}

fn channel_layout(
    op: &'static str,
    shape: &[usize],
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err(op, format!("needs [N, C, ...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err(
            op,
            format!("scale/shift must be [{c}] for input {shape:?}"),
        ));
    }
    Ok((n, c, numel(&shape[2..])))
}

impl<'t> Var<'t> {
    /// Mean binary cross-entropy of probabilities against `targets` (same
    /// shape). Probabilities are clamped to `[clamp, 1 - clamp]`; the gradient
    /// is zero wherever the clamp is active.
    pub fn binary_cross_entropy(self, targets: &Tensor, clamp: f64) -> Result<Var<'t>> {
        let p = self.value();
        if p.shape() != targets.shape() {
            return Err(dim_err(
                "binary_cross_entropy",
                format!("probabilities {:?} vs targets {:?}", p.shape(), targets.shape()),
            ));
        }
        let n = p.numel() as f64;
        let (lo, hi) = (clamp, 1.0 - clamp);
        let total: f64 = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let pc = p.clamp(lo, hi);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let y = targets.clone();
        Ok(self.tape().push(
            "binary_cross_entropy",
            Tensor::scalar(total / n),
            &[self],
            Box::new(move |args: &BackwardArgs<'_>| {
                let g = args.grad.data()[0] / n;
                let gp = args.inputs[0]
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &y)| {
                        if p < lo || p > hi {
                            0.0
                        } else {
                            g * ((1.0 - y) / (1.0 - p) - y / p)
                        }
                    })
                    .collect();
                vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), gp))]
            }),
        ))
    }
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    let xd = x.data();
    let last = rank - 1;
    let last_len = out_shape[last];
    let last_step = step[last];
    while out.len() < n {
        let mut s = src;
        for _ in 0..last_len {
            out.push(xd[s]);
            s += last_step;
        }
        // advance every axis but the innermost
        let mut axis = last;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            counter[axis] += 1;
            src += step[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            src -= step[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new(Precision::Double);
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let row = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new(Precision::Double);
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("by [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new(Precision::Double);
        let y = tape.constant(Tensor::zeros([3])).softmax(0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(t(&[2], &[1000., 0.])).softmax(0).unwrap().value();
        assert!(y.is_finite());
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] < 1e-300);
        // closed form e^k / (e + e^2 + e^3), evaluated offline
        let y = tape.constant(t(&[3], &[1., 2., 3.])).softmax(0).unwrap().value();
        let want = [0.090_030_573_17, 0.244_728_471_05, 0.665_240_955_77];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let tape = Tape::new(Precision::Double);
        assert!(tape.constant(Tensor::zeros([2, 2])).softmax(2).is_err());
    }

    #[test]
    fn softmax_non_last_axis_normalizes_columns() {
        let tape = Tape::new(Precision::Double);
        let x = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64).sin()));
        let y = x.softmax(0).unwrap().value();
        for col in 0..4 {
            let s: f64 = (0..3).map(|r| y.data()[r * 4 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_closed_form() {
        let tape = Tape::new(Precision::Double);
        let x = tape.constant(t(&[3], &[2., 4., 6.]));
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        // (x - 4) / sqrt(8/3 + 1e-5)
        let want = [-1.224_742_575_001_413_8, 0.0, 1.224_742_575_001_413_8];
        for (a, w) in y.data().iter().zip(want) {
            assert!((a - w).abs() < 1e-12, "{a} vs {w}");
        }
        let c = tape.constant(Tensor::full([4], 7.0));
        let y = c
            .layer_norm(tape.constant(Tensor::ones([4])), tape.constant(Tensor::zeros([4])), 1e-5)
            .unwrap()
            .value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new(Precision::Double);
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let v = tape.constant(x.clone());
        let p = v.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        // element (k, i, j) of the output is x[i, j, k]
        assert_eq!(p.value().data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value(), x);
        assert!(v.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::new(Precision::Double);
        let a = tape.constant(Tensor::from_fn([2, 1, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 2, 3], |i| 100.0 + i as f64));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 1).unwrap().value(), a.value());
        assert_eq!(c.narrow(1, 1, 2).unwrap().value(), b.value());
        assert!(c.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn suffix_broadcast_add() {
        let tape = Tape::new(Precision::Double);
        let x = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(t(&[3], &[1., 2., 3.]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 3., 1., 2., 3.]);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.get(b).data(), &[2., 2., 2.]);
        assert!(x.add(tape.constant(Tensor::zeros([2]))).is_err());
    }

    #[test]
    fn sum_axis_removes_axis() {
        let tape = Tape::new(Precision::Double);
        let x = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.value().data(), &[3., 12.]);
        let s0 = x.sum_axis(0).unwrap();
        assert_eq!(s0.value().data(), &[3., 5., 7.]);
    }
}
