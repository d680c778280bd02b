//! Clips, the on-disk dataset format, frame sampling, augmentation, splits
//! and the synthetic face-swap stand-in generator.

mod augment;
mod baseline;
mod io;
mod split;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub use augment::{flip_augment, sample_frames, Flip};
pub use baseline::{face_temporal_variance, mean_abs_frame_diff, ThresholdBaseline};
pub use io::{read_clip, write_clip, Manifest, ManifestEntry, CLIP_MAGIC, CLIP_VERSION, MANIFEST_VERSION};
pub use split::{split_dataset, split_labels, SplitRatios};
pub use synth::{face_mask, generate_clip, synth_generate, ArtifactKind, SynthSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt clip header: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: clip geometry {found} does not match manifest geometry {expected}")]
    Geometry {
        path: PathBuf,
        expected: ClipGeometry,
        found: ClipGeometry,
    },
    #[error("{path}: {detail}")]
    Value { path: PathBuf, detail: String },
    #[error("{path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("{0} does not exist")]
    MissingFile(PathBuf),
    #[error("clip `{clip}` has {available} frames, {requested} requested")]
    Frames {
        clip: String,
        requested: usize,
        available: usize,
    },
    #[error("invalid generator settings: {0}")]
    Config(String),
    #[error("cannot split dataset: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Extents of a stored clip, `T×C×H×W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipGeometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipGeometry {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }
}

impl fmt::Display for ClipGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.frames, self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// One video sample: frames `[T, C, H, W]` with scalars in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Tensor,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub source: String,
}

impl Clip {
    pub fn new(frames: Tensor, label: u8, source: impl Into<String>) -> std::result::Result<Self, String> {
        let source = source.into();
        if frames.rank() != 4 {
            return Err(format!("clip `{source}` frames must be [T, C, H, W], got {:?}", frames.shape()));
        }
        if label > 1 {
            return Err(format!("clip `{source}` has label {label}"));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("clip `{source}` holds value {v} outside [0, 1]"));
        }
        Ok(Self { frames, label, source })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn geometry(&self) -> ClipGeometry {
        let s = self.frames.shape();
        ClipGeometry::new(s[0], s[1], s[2], s[3])
    }

    /// Keeps `n` evenly spaced frames.
    pub fn sampled(&self, n: usize) -> Result<Clip> {
        let g = self.geometry();
        let idx = sample_frames(g.frames, n, &self.source)?;
        let len = g.frame_len();
        let mut data = Vec::with_capacity(n * len);
        for i in idx {
            data.extend_from_slice(&self.frames.data()[i * len..(i + 1) * len]);
        }
        Ok(Clip {
            frames: Tensor::new([n, g.channels, g.height, g.width], data).expect("sampled extents"),
            label: self.label,
            source: self.source.clone(),
        })
    }
}
