//! Neural layers shared by both video architectures.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`]s into it. A
//! forward pass runs inside a [`Session`], which binds every stored tensor to
//! a tape variable and carries the training/evaluation mode and the dropout
//! random stream.

mod attention;
mod conv;
mod dropout;
mod linear;
mod norm;
mod patch;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

pub use attention::{AttentionConfig, Encoder, MultiHeadAttention, TransformerBlock};
pub use conv::{mid_channels, Conv2Plus1d, Conv2Plus1dConfig, Conv3d};
pub use dropout::{dropout, Dropout};
pub use linear::{Linear, LinearInit};
pub use norm::{BatchNorm, LayerNorm, BATCH_NORM_MOMENTUM, NORM_EPS};
pub use patch::PatchEmbed;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; saved with the model, never differentiated.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Registry of every named tensor in a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(NnError::Config(format!(
                "parameter `{}` has shape {:?}, cannot assign {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over names and bit patterns of every stored tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a [`ParamStore`].
pub struct Session<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    stat_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Session<'t> {
    /// Training-mode session: trainable parameters become differentiable leaves.
    pub fn train(tape: &'t Tape, store: &ParamStore, seed: u64) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => tape.leaf(e.value.rounded(tape.precision())),
                ParamKind::Buffer => tape.constant(e.value.clone()),
            })
            .collect();
        Self::with_vars(tape, vars, Mode::Train, seed)
    }

    /// Evaluation-mode session; nothing is differentiable and nothing is recorded
    /// back into the store.
    pub fn eval(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| tape.constant(e.value.rounded(tape.precision())))
            .collect();
        Self::with_vars(tape, vars, Mode::Eval, 0)
    }

    /// Binds caller-provided variables, one per store entry in registry order.
    pub fn with_vars(tape: &'t Tape, vars: Vec<Var<'t>>, mode: Mode, seed: u64) -> Self {
        Self {
            tape,
            vars,
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
    pub(crate) fn dropout_mask(&self, shape: &[usize], p: f64) -> Tensor {
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        Tensor::from_fn(shape.to_vec(), |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        })
    }

    pub(crate) fn record_stat(&self, id: ParamId, value: Tensor) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by this pass (training mode only).
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    /// Gradient per store entry; `None` for entries that are not leaves.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|&v| v.requires_grad().then(|| grads.get(v)))
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("std is positive");
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }

    /// He-normal with the given fan.
    pub fn kaiming_normal(&mut self, shape: &[usize], fan: usize) -> Tensor {
        let std = (2.0 / fan as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive");
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros([2]), ParamKind::Trainable).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros([2]), ParamKind::Trainable),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn set_keeps_shape() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros([2]), ParamKind::Trainable).unwrap();
        assert!(store.set(id, Tensor::zeros([3])).is_err());
        store.set(id, Tensor::ones([2])).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut init = Init::new(3);
        let t = init.trunc_normal(&[10_000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / 10_000.0;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn eval_session_has_no_leaves() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::ones([2]), ParamKind::Trainable).unwrap();
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        assert!(!s.param(ParamId(0)).requires_grad());
        let tape = Tape::new(Precision::Double);
        let s = Session::train(&tape, &store, 0);
        assert!(s.param(ParamId(0)).requires_grad());
    }
}
