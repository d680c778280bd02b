use super::{Init, NnError, ParamId, ParamKind, ParamStore, Result, Session};
use crate::tensor::{Tensor, Var};

/// How a [`Linear`] weight starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearInit {
    /// Truncated normal with the given standard deviation.
    TruncNormal(f64),
    Zeros,
}

/// Affine map over the last axis. The weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_init: LinearInit,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(NnError::Config(format!(
                "linear `{name}` needs positive extents, got {in_dim}→{out_dim}"
            )));
        }
        let w = match weight_init {
            LinearInit::TruncNormal(std) => init.trunc_normal(&[in_dim, out_dim], std),
            LinearInit::Zeros => Tensor::zeros([in_dim, out_dim]),
        };
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), ParamKind::Trainable))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// `x` is `[..., in]`; the result is `[..., out]`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(NnError::Tensor(crate::tensor::TensorError::Dimension {
                op: "linear",
                detail: format!("input {shape:?} does not end in {}", self.in_dim),
            }));
        }
        let rows = x.value().numel() / self.in_dim;
        let flat = x.reshape([rows, self.in_dim])?;
        let mut y = flat.matmul(s.param(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(s.param(b))?;
        }
        *shape.last_mut().expect("rank >= 1") = self.out_dim;
        Ok(y.reshape(shape)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tape};

    #[test]
    fn counts_weights_and_bias() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let l = Linear::new(&mut store, &mut init, "head", 192, 1, true, LinearInit::TruncNormal(0.02)).unwrap();
        assert_eq!(l.param_count(), 193);
        assert_eq!(store.trainable_count(), 193);
    }

    #[test]
    fn applies_over_last_axis() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let l = Linear::new(&mut store, &mut init, "l", 3, 2, true, LinearInit::Zeros).unwrap();
        let w = Tensor::new([3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        store.set(l.weight, w).unwrap();
        store.set(l.bias.unwrap(), Tensor::new([2], vec![0.5, -0.5]).unwrap()).unwrap();
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        let x = tape.constant(Tensor::new([2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = l.forward(&s, x).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 2]);
        assert_eq!(y.value().data(), &[4.5, 4.5, 10.5, 10.5]);
        let bad = tape.constant(Tensor::zeros([2, 4]));
        assert!(l.forward(&s, bad).is_err());
    }
}
