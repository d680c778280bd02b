//! Binary cross-entropy, Adam and cosine learning-rate annealing.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Precision, Tensor, TensorError, Var};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("label {value} at index {index} is not 0 or 1")]
    Label { index: usize, value: f64 },
    #[error("non-finite gradient in parameter `{name}` (entry {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("optimizer state does not match the parameter store: {0}")]
    State(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

fn check_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        Some(index) => Err(OptimError::Label {
            index,
            value: labels[index],
        }),
        None => Ok(()),
    }
}

/// Mean BCE of probabilities `p` (shape `[N]`) against 0/1 labels.
pub fn bce_loss<'t>(p: Var<'t>, labels: &[f64]) -> Result<Var<'t>> {
    check_labels(labels)?;
    let targets = Tensor::new(p.shape(), labels.to_vec())?;
    Ok(p.binary_cross_entropy(&targets, BCE_CLAMP)?)
}

/// The same loss on plain numbers.
pub fn bce_value(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_labels(labels)?;
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(OptimError::Tensor(TensorError::Contract(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        ))));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, one slot per store entry; buffers (non-trainable entries)
/// keep `None`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |e: &crate::nn::ParamEntry| {
            (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape().to_vec()))
        };
        Self {
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            t: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected update. `grads` has one slot per store entry.
    ///
    /// Every gradient is scanned before anything is written, so a non-finite
    /// gradient leaves both the store and the state untouched.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        state: &mut AdamState,
        lr: f64,
        precision: Precision,
    ) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(OptimError::State(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                state.m.len(),
                store.len()
            )));
        }
        for (index, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(OptimError::NonFiniteGradient {
                        name: store.entries()[index].name.clone(),
                        index,
                    });
                }
                if g.shape() != store.entries()[index].value.shape() {
                    return Err(OptimError::State(format!(
                        "gradient {:?} for `{}` of shape {:?}",
                        g.shape(),
                        store.entries()[index].name,
                        store.entries()[index].value.shape()
                    )));
                }
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (&grads[i], &mut state.m[i], &mut state.v[i]) else {
                continue;
            };
            let mut m_new = m.to_vec();
            let mut v_new = v.to_vec();
            let mut theta = store.get(id).to_vec();
            for (k, &gk) in g.data().iter().enumerate() {
                m_new[k] = self.beta1 * m_new[k] + (1.0 - self.beta1) * gk;
                v_new[k] = self.beta2 * v_new[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m_new[k] / c1;
                let v_hat = v_new[k] / c2;
                theta[k] = precision.round(theta[k] - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            let shape = g.shape().to_vec();
            *m = Tensor::new(shape.clone(), m_new)?;
            *v = Tensor::new(shape.clone(), v_new)?;
            store
                .set(id, Tensor::new(shape, theta)?)
                .map_err(|e| OptimError::State(e.to_string()))?;
        }
        Ok(())
    }
}

/// Half-cosine decay from `eta_max` at `t = 0` to `eta_min` at `t = t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(OptimError::Schedule("period must be at least one episode".into()));
        }
        if !(eta_min <= eta_max) {
            return Err(OptimError::Schedule(format!("eta_min {eta_min} exceeds eta_max {eta_max}")));
        }
        Ok(Self {
            eta_max,
            eta_min,
            t_max,
        })
    }

    pub fn lr(&self, t: usize) -> f64 {
        if t > self.t_max {
            log::warn!(
                "schedule step {t} is past its period of {}; holding the minimum rate",
                self.t_max
            );
            return self.eta_min;
        }
        let phase = std::f64::consts::PI * t as f64 / self.t_max as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos())
    }
}
