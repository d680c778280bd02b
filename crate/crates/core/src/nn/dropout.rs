use super::{NnError, Result, Session};
use crate::tensor::Var;

/// Inverted dropout: identity in evaluation mode; in training mode each
/// element is zeroed with probability `p` and survivors are scaled by `1/(1-p)`.
pub fn dropout<'t>(s: &Session<'t>, x: Var<'t>, p: f64) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !s.is_training() || p == 0.0 {
        return Ok(x);
    }
    let mask = s.dropout_mask(&x.shape(), p);
    Ok(x.mul_const(&mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        dropout(s, x, self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Precision, Tape, Tensor};

    #[test]
    fn identity_cases() {
        let store = ParamStore::new();
        let x = Tensor::from_fn([100], |i| i as f64);
        let tape = Tape::new(Precision::Double);
        let train = Session::train(&tape, &store, 1);
        let eval = Session::eval(&tape, &store);
        let v = tape.constant(x.clone());
        assert_eq!(dropout(&train, v, 0.0).unwrap().value(), x);
        assert_eq!(dropout(&eval, v, 0.2).unwrap().value(), x);
        assert!(Dropout::new(1.0).is_err());
        assert!(dropout(&train, v, 1.5).is_err());
    }

    #[test]
    fn training_mean_is_preserved() {
        // Monte-Carlo estimate of E[dropout(1)] = 1.
        let store = ParamStore::new();
        let tape = Tape::new(Precision::Double);
        let s = Session::train(&tape, &store, 42);
        let y = dropout(&s, tape.constant(Tensor::ones([1_000_000])), 0.2).unwrap().value();
        let mean = y.sum() / 1e6;
        assert!((0.995..=1.005).contains(&mean), "{mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.2).abs() < 0.005);
    }
}
