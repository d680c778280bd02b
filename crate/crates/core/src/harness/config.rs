use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::models::ModelConfig;
use crate::tensor::Precision;

const PRESETS: [(&str, &str); 6] = [
    ("cnn-a", include_str!("../../presets/cnn-a.toml")),
    ("cnn-b", include_str!("../../presets/cnn-b.toml")),
    ("vit-1", include_str!("../../presets/vit-1.toml")),
    ("vit-2", include_str!("../../presets/vit-2.toml")),
    ("vit-3", include_str!("../../presets/vit-3.toml")),
    ("vit-4", include_str!("../../presets/vit-4.toml")),
];

pub const PRESET_NAMES: [&str; 6] = ["cnn-a", "cnn-b", "vit-1", "vit-2", "vit-3", "vit-4"];

/// Run-level hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub episodes: usize,
    pub batch_size: usize,
    /// Cosine annealing from `lr` to `eta_min` over the run.
    #[serde(default)]
    pub scheduler: bool,
    #[serde(default)]
    pub eta_min: f64,
    #[serde(default)]
    pub seed: u64,
    /// Wall-clock ceiling in minutes.
    pub budget_min: f64,
    #[serde(default)]
    pub precision: Precision,
    /// Random horizontal/vertical flips of training clips.
    #[serde(default = "yes")]
    pub augment: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Frames sampled from each clip.
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Geometry profile a preset is instantiated at.
///
/// Presets are written for `Desk` (64×64 clips, half-width CNN). `Micro`
/// shrinks everything to 16×16 clips with 4 frames so whole runs take
/// minutes on one core; `Paper` uses full-width models on 224×224 clips and
/// may exceed any sensible budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Micro,
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "micro" => Ok(Scale::Micro),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(format!("unknown scale `{other}` (expected micro, desk or paper)")),
        }
    }
}

impl Scale {
    /// Clip side length the profile expects.
    pub fn resolution(self) -> usize {
        match self {
            Scale::Micro => 16,
            Scale::Desk => 64,
            Scale::Paper => 224,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment configs serialize")
    }

    pub fn preset_text(name: &str) -> Result<&'static str> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| HarnessError::UnknownPreset { name: name.to_string() })
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml(Self::preset_text(name)?)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(HarnessError::Config(m));
        if t.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if t.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(t.budget_min > 0.0) {
            return bad(format!("budget must be positive, got {} min", t.budget_min));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", t.lr));
        }
        if !(0.0..=t.lr).contains(&t.eta_min) {
            return bad(format!("eta_min {} must lie in [0, lr]", t.eta_min));
        }
        if self.data.frames == 0 {
            return bad("frames per clip must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout()) {
            return bad(format!("dropout must be in [0, 1), got {}", self.model.dropout()));
        }
        Ok(())
    }

    /// Rewrites the geometry-dependent fields for `scale`.
    pub fn at_scale(mut self, scale: Scale) -> Self {
        match (&mut self.model, scale) {
            (_, Scale::Desk) => {}
            (ModelConfig::R2Plus1D(c), Scale::Micro) => c.width_multiplier = 0.125,
            (ModelConfig::R2Plus1D(c), Scale::Paper) => c.width_multiplier = 1.0,
            (ModelConfig::ViViT(c), Scale::Micro) => {
                let (dim, heads, head_dim) = if c.dim >= 512 { (64, 4, 16) } else { (32, 2, 16) };
                c.dim = dim;
                c.heads = heads;
                c.head_dim = head_dim;
                c.hidden = None;
                c.patch = 4;
            }
            (ModelConfig::ViViT(c), Scale::Paper) => c.patch = 16,
        }
        if scale == Scale::Micro {
            self.data.frames = 4;
        }
        self
    }

    /// SHA-256 over the canonical JSON form of the whole config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("experiment configs serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Applies `key=value` overrides to a parsed config document.
///
/// A bare key must name exactly one field across the top level and the
/// sections; `section.key` addresses a field directly. Values are read as
/// TOML literals and fall back to plain strings.
pub fn apply_overrides(doc: &mut toml::Table, sets: &[String]) -> Result<()> {
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{set}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        if let Some((section, field)) = key.split_once('.') {
            let table = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| HarnessError::Config(format!("`{section}` is not a section")))?;
            table.insert(field.to_string(), value);
            continue;
        }
        let mut hits: Vec<Option<String>> = Vec::new();
        if doc.get(key).is_some_and(|v| !v.is_table()) {
            hits.push(None);
        }
        for (name, v) in doc.iter() {
            if v.as_table().is_some_and(|t| t.contains_key(key)) {
                hits.push(Some(name.clone()));
            }
        }
        match hits.as_slice() {
            [] => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
            [None] => {
                doc.insert(key.to_string(), value);
            }
            [Some(section)] => {
                let section = section.clone();
                doc[&section].as_table_mut().expect("checked above").insert(key.to_string(), value);
            }
            _ => {
                let names: Vec<String> = hits.iter().map(|h| h.clone().unwrap_or_default()).collect();
                return Err(HarnessError::Config(format!(
                    "key `{key}` is ambiguous between sections {}",
                    names.join(", ")
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
            assert_eq!(cfg.train.batch_size, 32);
        }
        let err = ExperimentConfig::preset("vit-9").unwrap_err().to_string();
        assert!(err.contains("cnn-a") && err.contains("vit-4"), "{err}");
    }

    #[test]
    fn preset_hyperparameters() {
        let get = |n| ExperimentConfig::preset(n).unwrap();
        let rows = [
            ("cnn-a", 1e-4, 10, false, 0.0),
            ("cnn-b", 1e-3, 10, false, 0.0),
            ("vit-1", 1e-4, 100, false, 0.0),
            ("vit-2", 1e-3, 100, true, 0.2),
            ("vit-3", 1e-3, 50, true, 0.2),
            ("vit-4", 1e-2, 30, true, 0.2),
        ];
        for (name, lr, episodes, sched, p) in rows {
            let c = get(name);
            assert_eq!((c.train.lr, c.train.episodes, c.train.scheduler), (lr, episodes, sched), "{name}");
            assert_eq!(c.model.dropout(), p, "{name}");
        }
        for (name, dim, heads) in [("vit-1", 192, 3), ("vit-2", 192, 3), ("vit-3", 512, 8), ("vit-4", 512, 8)] {
            let ModelConfig::ViViT(v) = get(name).model else { panic!("{name} is not a ViViT") };
            assert_eq!((v.dim, v.heads, v.head_dim, v.spatial_depth + v.temporal_depth), (dim, heads, 64, 4));
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = ExperimentConfig::preset_text("vit-2").unwrap().replace("mlp_ratio", "mlp_ratoi");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("mlp_ratoi") && err.contains("line"), "{err}");
        let text = format!("{}\n[extra]\nx = 1\n", ExperimentConfig::preset_text("cnn-a").unwrap());
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn overrides() {
        let mut doc: toml::Table = toml::from_str(ExperimentConfig::preset_text("vit-2").unwrap()).unwrap();
        apply_overrides(&mut doc, &["dropout=0".into(), "train.episodes=7".into(), "frames=5".into()]).unwrap();
        let cfg: ExperimentConfig = doc.try_into().unwrap();
        assert_eq!(cfg.model.dropout(), 0.0);
        assert_eq!(cfg.train.episodes, 7);
        assert_eq!(cfg.data.frames, 5);

        let mut doc: toml::Table = toml::from_str(ExperimentConfig::preset_text("vit-2").unwrap()).unwrap();
        assert!(apply_overrides(&mut doc, &["nonsense=1".into()]).is_err());
        assert!(apply_overrides(&mut doc, &["no-equals".into()]).is_err());
        apply_overrides(&mut doc, &["precision=double".into()]).unwrap();
        let cfg: ExperimentConfig = doc.try_into().unwrap();
        assert_eq!(cfg.train.precision, Precision::Double);
    }

    #[test]
    fn invalid_values() {
        let mut cfg = ExperimentConfig::preset("vit-1").unwrap();
        cfg.train.episodes = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset("vit-1").unwrap();
        cfg.train.budget_min = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset("vit-1").unwrap();
        cfg.train.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn micro_scale() {
        let cfg = ExperimentConfig::preset("vit-3").unwrap().at_scale(Scale::Micro);
        let ModelConfig::ViViT(v) = &cfg.model else { unreachable!() };
        assert_eq!((v.dim, v.heads, v.head_dim, v.patch), (64, 4, 16, 4));
        assert_eq!(cfg.data.frames, 4);
        let cfg = ExperimentConfig::preset("cnn-a").unwrap().at_scale(Scale::Micro);
        let ModelConfig::R2Plus1D(c) = &cfg.model else { unreachable!() };
        assert_eq!(c.width_multiplier, 0.125);
    }

    #[test]
    fn toml_round_trip_and_digest() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.digest(), cfg.digest());
        }
        let a = ExperimentConfig::preset("vit-2").unwrap();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
