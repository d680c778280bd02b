use super::{ParamId, ParamKind, ParamStore, Result, Session};
use crate::tensor::{Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Normalises the last axis, then applies a learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([dim]), ParamKind::Trainable)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]), ParamKind::Trainable)?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(s.param(self.gamma), s.param(self.beta), NORM_EPS)?)
    }
}

/// Per-channel normalisation over axis 1 of `[N×C×...]`.
///
/// Training mode normalises with batch statistics and records updated running
/// statistics on the session; evaluation mode uses the stored running
/// statistics and has no side effects.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::Trainable)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros([channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones([channels]),
                ParamKind::Buffer,
            )?,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_training() {
            let shape = x.shape();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let (y, mean, var) = x.batch_norm_train(gamma, beta, NORM_EPS)?;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let m = BATCH_NORM_MOMENTUM;
            let old_mean = s.param(self.running_mean).value();
            let old_var = s.param(self.running_var).value();
            let new_mean = Tensor::from_fn([self.channels], |c| (1.0 - m) * old_mean.data()[c] + m * mean[c]);
            let new_var =
                Tensor::from_fn([self.channels], |c| (1.0 - m) * old_var.data()[c] + m * var[c] * unbias);
            s.record_stat(self.running_mean, new_mean);
            s.record_stat(self.running_var, new_var);
            Ok(y)
        } else {
            let mean = s.param(self.running_mean).value();
            let var = s.param(self.running_var).value();
            Ok(x.batch_norm_eval(gamma, beta, mean.data(), var.data(), NORM_EPS)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tape};

    #[test]
    fn batch_norm_training_records_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::from_fn([2, 2, 3], |i| i as f64);
        let tape = Tape::new(Precision::Double);
        let s = Session::train(&tape, &store, 0);
        let y = bn.forward(&s, tape.constant(x)).unwrap().value();
        // channel 0 holds {0,1,2,6,7,8}: normalised output has zero mean
        let ch0: f64 = [0, 1, 2, 6, 7, 8].iter().map(|&i| y.data()[i]).sum();
        assert!(ch0.abs() < 1e-12);
        let updates = s.take_stat_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1.data()[0] - 0.1 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_is_batch_independent() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let a = Tensor::from_fn([1, 2, 4], |i| i as f64 * 0.3);
        let b = Tensor::from_fn([2, 2, 4], |i| if i < 8 { i as f64 * 0.3 } else { -5.0 });
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        let ya = bn.forward(&s, tape.constant(a)).unwrap().value();
        let yb = bn.forward(&s, tape.constant(b)).unwrap().value();
        assert_eq!(ya.data(), &yb.data()[..8]);
        assert!(s.take_stat_updates().is_empty());
    }
}
