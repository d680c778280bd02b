//! The two video classifiers, their configuration types and checkpoints.

mod checkpoint;
mod r2plus1d;
mod vivit;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{Init, NnError, ParamStore, Session};
use crate::tensor::{Precision, Tape, Tensor, TensorError, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use r2plus1d::{R2Plus1D, R2Plus1DConfig};
pub use vivit::{ViViT, ViViTConfig};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("checkpoint {path} was written for config digest {found}, but the model config has digest {expected}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Geometry of the clips a model consumes; batches are `[N, C, T, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
        }
    }

    pub fn batch_shape(&self, n: usize) -> [usize; 5] {
        [n, self.channels, self.frames, self.height, self.width]
    }

    pub fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[0] == 0 || shape[1..] != self.batch_shape(1)[1..] {
            return Err(ModelError::Tensor(TensorError::Dimension {
                op: "model input",
                detail: format!(
                    "clip batch {shape:?} does not match model geometry [N, {}, {}, {}, {}]",
                    self.channels, self.frames, self.height, self.width
                ),
            }));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelConfig {
    #[serde(rename = "r2plus1d")]
    R2Plus1D(R2Plus1DConfig),
    #[serde(rename = "vivit")]
    ViViT(ViViTConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::R2Plus1D(_) => "r2plus1d",
            Self::ViViT(_) => "vivit",
        }
    }

    /// Classifier dropout; the CNN has none.
    pub fn dropout(&self) -> f64 {
        match self {
            Self::R2Plus1D(_) => 0.0,
            Self::ViViT(c) => c.dropout,
        }
    }
}

/// SHA-256 over the canonical JSON of the architecture and input geometry.
pub fn config_digest(config: &ModelConfig, input: &InputShape) -> [u8; 32] {
    let json = serde_json::to_string(&(config, input)).expect("configs serialize");
    Sha256::digest(json.as_bytes()).into()
}

/// A thresholded model output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    /// `true` means fake; ties at the threshold count as fake.
    pub fake: bool,
}

impl Prediction {
    pub const THRESHOLD: f64 = 0.5;

    pub fn new(probability: f64) -> Self {
        Self {
            probability,
            fake: probability >= Self::THRESHOLD,
        }
    }

    pub fn label(&self) -> u8 {
        u8::from(self.fake)
    }
}

#[derive(Debug, Clone)]
pub enum Net {
    R2Plus1D(R2Plus1D),
    ViViT(ViViT),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    input: InputShape,
    store: ParamStore,
    net: Net,
}

impl Model {
    pub fn build(config: &ModelConfig, input: InputShape, seed: u64) -> Result<Self> {
        if input.channels == 0 || input.frames == 0 || input.height == 0 || input.width == 0 {
            return Err(ModelError::Config(format!("degenerate input geometry {input:?}")));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let net = match config {
            ModelConfig::R2Plus1D(c) => Net::R2Plus1D(R2Plus1D::new(&mut store, &mut init, c, input)?),
            ModelConfig::ViViT(c) => Net::ViViT(ViViT::new(&mut store, &mut init, c, input)?),
        };
        Ok(Self {
            config: config.clone(),
            input,
            store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.config, &self.input)
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Trainable scalar count as computed by the layers themselves.
    pub fn param_count(&self) -> usize {
        match &self.net {
            Net::R2Plus1D(m) => m.param_count(),
            Net::ViViT(m) => m.param_count(),
        }
    }

    /// Trainable scalars grouped by top-level module name, in registry order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in self.store.entries() {
            if e.kind != crate::nn::ParamKind::Trainable {
                continue;
            }
            let module = e.name.split('.').next().unwrap_or(&e.name).to_string();
            if !counts.contains_key(&module) {
                order.push(module.clone());
            }
            *counts.entry(module).or_default() += e.value.numel();
        }
        order.into_iter().map(|m| (m.clone(), counts[&m])).collect()
    }

    /// Makes every attention layer propagate sign-flipped gradients.
    pub fn inject_attention_fault(&mut self) -> Result<()> {
        match &mut self.net {
            Net::ViViT(m) => {
                m.inject_attention_fault();
                Ok(())
            }
            Net::R2Plus1D(_) => Err(ModelError::Config("the CNN has no attention layers".into())),
        }
    }

    /// Probabilities `[N]` for a clip batch `[N, C, T, H, W]`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.net {
            Net::R2Plus1D(m) => m.forward(s, x),
            Net::ViViT(m) => m.forward(s, x),
        }
    }

    /// Evaluation-mode probabilities.
    pub fn probabilities(&self, clips: &Tensor, precision: Precision) -> Result<Vec<f64>> {
        self.input.check(clips.shape())?;
        let tape = Tape::new(precision);
        let s = Session::eval(&tape, &self.store);
        let x = tape.constant(clips.rounded(precision));
        Ok(self.forward(&s, x)?.value().into_vec())
    }

    pub fn predict(&self, clips: &Tensor, precision: Precision) -> Result<Vec<Prediction>> {
        Ok(self
            .probabilities(clips, precision)?
            .into_iter()
            .map(Prediction::new)
            .collect())
    }

    pub fn save(&self, path: impl Into<PathBuf>) -> Result<()> {
        checkpoint::save(self, &path.into())
    }

    /// Builds the model described by `config`/`input` and fills it from a
    /// checkpoint, rejecting files written for a different configuration.
    pub fn load(path: impl Into<PathBuf>, config: &ModelConfig, input: InputShape) -> Result<Self> {
        let mut model = Self::build(config, input, 0)?;
        checkpoint::load_into(&mut model, &path.into())?;
        Ok(model)
    }
}
