use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use vf_core::harness::{apply_overrides, DataConfig, ExperimentConfig, Scale, TrainConfig};
use vf_core::models::ModelConfig;

use crate::usage;

/// On-disk run configuration: an experiment plus an optional `[output]`
/// section. Relative paths resolve against the file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    name: String,
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output: Option<PathBuf>,
}

pub enum Source<'a> {
    Preset(&'a str),
    File(&'a Path),
}

/// Loads a preset or config file, then applies the scale and `--set`
/// overrides in that order.
pub fn load(source: Source<'_>, scale: Option<Scale>, sets: &[String]) -> Result<RunConfig> {
    let (text, origin, base) = match source {
        Source::Preset(name) => (
            ExperimentConfig::preset_text(name).map_err(usage)?.to_string(),
            format!("preset {name}"),
            None,
        ),
        Source::File(path) => (
            fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?,
            path.display().to_string(),
            Some(path.parent().unwrap_or(Path::new(".")).to_path_buf()),
        ),
    };
    let file: RunConfigFile = toml::from_str(&text).map_err(|e| usage(format!("{origin}: {e}")))?;
    let resolve = |p: PathBuf| match &base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    };
    let mut experiment = ExperimentConfig {
        name: file.name,
        model: file.model,
        train: file.train,
        data: file.data,
    };
    experiment.data.manifest = experiment.data.manifest.map(resolve);
    experiment.validate().map_err(|e| usage(format!("{origin}: {e}")))?;
    if let Some(scale) = scale {
        experiment = experiment.at_scale(scale);
    }
    if !sets.is_empty() {
        let mut doc: toml::Table = toml::from_str(&experiment.to_toml()).expect("serialized configs parse");
        apply_overrides(&mut doc, sets).map_err(usage)?;
        let text = toml::to_string(&doc).expect("tables serialize");
        experiment = ExperimentConfig::from_toml(&text).map_err(|e| usage(format!("after --set: {e}")))?;
    }
    Ok(RunConfig {
        experiment,
        output: file.output.dir.map(resolve),
    })
}
