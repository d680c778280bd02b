use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, metrics_from_probs, write_curves, EvalMetrics, ExperimentConfig, HarnessError, Result};
use crate::data::{Clip, Flip, Manifest, Split};
use crate::models::{InputShape, Model, ModelConfig};
use crate::nn::Session;
use crate::optim::{bce_loss, Adam, AdamState, CosineSchedule, BCE_CLAMP};
use crate::tensor::{Precision, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub name: String,
    pub model_kind: String,
    pub config_digest: String,
    pub model_digest: String,
    pub seed: u64,
    pub precision: Precision,
    pub param_count: usize,
    pub input: InputShape,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub threads: usize,
    /// Interpretation choices baked into the run, keyed by topic.
    pub decisions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<EpisodeRecord>,
    /// Computed once on the test split after the last completed episode.
    pub test: EvalMetrics,
    /// The wall-clock budget ran out before the last episode.
    pub truncated: bool,
    pub metadata: RunMetadata,
}

impl RunResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run results serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("run result: {e}")))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub result: RunResult,
    pub model: Model,
}

/// Elapsed-time source for budget checks and the `seconds` column.
pub trait Clock {
    fn elapsed(&self) -> Duration;
}

pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Packs clips `[T, C, H, W]` into a batch `[N, C, T, H, W]`.
pub fn assemble_batch(clips: &[Clip]) -> Tensor {
    let g = clips[0].geometry();
    let plane = g.height * g.width;
    let mut out = Vec::with_capacity(clips.len() * g.numel());
    for clip in clips {
        let d = clip.frames().data();
        for c in 0..g.channels {
            for t in 0..g.frames {
                let at = (t * g.channels + c) * plane;
                out.extend_from_slice(&d[at..at + plane]);
            }
        }
    }
    Tensor::new(vec![clips.len(), g.channels, g.frames, g.height, g.width], out).expect("clips share geometry")
}

fn flip_for(seed: u64, episode: usize, clip: usize) -> Flip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((episode as u64) << 32) | clip as u64);
    Flip::choose(&mut rng)
}

fn load_batch(
    manifest: &Manifest,
    indices: &[usize],
    frames: usize,
    flips: Option<(u64, usize)>,
) -> Result<(Tensor, Vec<f64>)> {
    let clips = indices
        .par_iter()
        .map(|&i| {
            let clip = manifest.load_clip(i)?.sampled(frames)?;
            Ok(match flips {
                Some((seed, episode)) => clip.flipped(flip_for(seed, episode, i)),
                None => clip,
            })
        })
        .collect::<Result<Vec<Clip>>>()?;
    let labels = clips.iter().map(|c| f64::from(c.label)).collect();
    Ok((assemble_batch(&clips), labels))
}

/// Evaluation-mode metrics over the clips at `indices`.
///
/// Batches run in parallel on a read-only model; every clip's probability is
/// independent of how the clips are partitioned.
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    indices: &[usize],
    frames: usize,
    batch_size: usize,
    precision: Precision,
) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(HarnessError::Config("cannot evaluate an empty clip set".into()));
    }
    let probs: Vec<Vec<f64>> = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, _) = load_batch(manifest, chunk, frames, None)?;
            Ok(model.probabilities(&x, precision)?)
        })
        .collect::<Result<_>>()?;
    let probs: Vec<f64> = probs.concat();
    let labels: Vec<u8> = indices.iter().map(|&i| manifest.entries[i].label).collect();
    metrics_from_probs(&probs, &labels)
}

pub fn evaluate_split(
    model: &Model,
    manifest: &Manifest,
    split: Split,
    frames: usize,
    batch_size: usize,
    precision: Precision,
) -> Result<EvalMetrics> {
    let indices = manifest.indices(split);
    if indices.is_empty() {
        return Err(HarnessError::EmptySplit(split));
    }
    evaluate(model, manifest, &indices, frames, batch_size, precision)
}

fn decisions(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut d = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        d.insert(k.to_string(), v);
    };
    put("episode", "one full pass over the training split".into());
    put("metric", "accuracy at threshold 0.5 (ties count as fake); PPV reported separately".into());
    put("validation", "once per episode, evaluation mode".into());
    put(
        "schedule",
        if cfg.train.scheduler {
            format!(
                "cosine per episode, t = episode - 1, T_max = {}, eta_min = {}",
                cfg.train.episodes, cfg.train.eta_min
            )
        } else {
            "constant".into()
        },
    );
    put(
        "augmentation",
        if cfg.train.augment {
            "one flip per clip per episode: horizontal, vertical or none, each 1/3".into()
        } else {
            "none".into()
        },
    );
    put("frame_sampling", "evenly spaced, endpoints included".into());
    put("loss", format!("mean binary cross-entropy, probabilities clamped to [{BCE_CLAMP}, 1 - {BCE_CLAMP}]"));
    put("optimizer", "Adam, beta1 0.9, beta2 0.999, eps 1e-8".into());
    put("train_metrics", "accumulated over the episode in training mode".into());
    put("early_stopping", "none".into());
    match &cfg.model {
        ModelConfig::R2Plus1D(c) => {
            put("cnn_width_multiplier", c.width_multiplier.to_string());
            put("cnn_inter_relu", c.inter_relu.to_string());
            put("cnn_norm", "batch norm after every factorised conv".into());
        }
        ModelConfig::ViViT(c) => {
            put("vivit_depth", format!("{} spatial + {} temporal", c.spatial_depth, c.temporal_depth));
            put("vivit_embedding", format!("{0}x{0} patches per frame, learned positions", c.patch));
            put("vivit_dropout", format!("{} before the classifier output layer", c.dropout));
        }
    }
    d
}

fn batch_seed(seed: u64, episode: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | ((episode as u64) << 24) | batch as u64);
    rng.next_u64()
}

/// Trains from scratch on the manifest's train split with the wall clock.
pub fn train(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<TrainOutcome> {
    train_with(cfg, manifest, &WallClock::start(), &mut |_| {})
}

/// Training loop with an explicit clock and a per-episode observer.
pub fn train_with(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    clock: &dyn Clock,
    observer: &mut dyn FnMut(&EpisodeRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let g = manifest.geometry;
    let n = cfg.data.frames;
    if n > g.frames {
        return Err(crate::data::DataError::Frames {
            clip: manifest.root().display().to_string(),
            requested: n,
            available: g.frames,
        }
        .into());
    }
    let train_idx = manifest.indices(Split::Train);
    let val_idx = manifest.indices(Split::Val);
    let test_idx = manifest.indices(Split::Test);
    for (split, idx) in [(Split::Train, &train_idx), (Split::Val, &val_idx), (Split::Test, &test_idx)] {
        if idx.is_empty() {
            return Err(HarnessError::EmptySplit(split));
        }
    }

    let input = InputShape::new(g.channels, n, g.height, g.width);
    let mut model = Model::build(&cfg.model, input, t.seed)?;
    let schedule = if t.scheduler {
        Some(CosineSchedule::new(t.lr, t.eta_min, t.episodes)?)
    } else {
        None
    };
    let adam = Adam::default();
    let mut state = AdamState::new(model.store());
    let mut order_rng = ChaCha8Rng::seed_from_u64(t.seed);
    order_rng.set_stream(2);
    let budget = Duration::from_secs_f64(t.budget_min * 60.0);

    let mut records = Vec::with_capacity(t.episodes);
    let mut truncated = false;
    'episodes: for episode in 1..=t.episodes {
        let lr = schedule.map_or(t.lr, |s| s.lr(episode - 1));
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, chunk) in order.chunks(t.batch_size).enumerate() {
            if clock.elapsed() > budget {
                truncated = true;
                break 'episodes;
            }
            let flips = t.augment.then_some((t.seed, episode));
            let (x, y) = load_batch(manifest, chunk, n, flips)?;
            let tape = Tape::new(t.precision);
            let s = Session::train(&tape, model.store(), batch_seed(t.seed, episode, batch));
            let p = model.forward(&s, tape.constant(x.rounded(t.precision)))?;
            let loss = bce_loss(p, &y)?;
            let value = loss.value().item()?;
            let diverged = |detail: String| HarnessError::Diverged {
                episode,
                batch: batch + 1,
                lr,
                detail,
            };
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            let grads = tape.backward(loss)?;
            let param_grads = s.param_grads(&grads);
            adam.step(model.store_mut(), &param_grads, &mut state, lr, t.precision)
                .map_err(|e| diverged(e.to_string()))?;
            for (id, value) in s.take_stat_updates() {
                model.store_mut().set(id, value)?;
            }
            loss_sum += value * chunk.len() as f64;
            correct += p
                .value()
                .data()
                .iter()
                .zip(&y)
                .filter(|(&p, &y)| f64::from(u8::from(p >= 0.5)) == y)
                .count();
        }
        let val = evaluate(&model, manifest, &val_idx, n, t.batch_size, t.precision)?;
        let record = EpisodeRecord {
            episode,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
            seconds: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} episode {episode}/{}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            cfg.name,
            t.episodes,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        observer(&record);
        records.push(record);
    }
    if truncated {
        log::warn!(
            "{}: budget of {} min reached after {} of {} episodes",
            cfg.name,
            t.budget_min,
            records.len(),
            t.episodes
        );
    }

    let test = evaluate(&model, manifest, &test_idx, n, t.batch_size, t.precision)?;
    let metadata = RunMetadata {
        name: cfg.name.clone(),
        model_kind: cfg.model.kind().to_string(),
        config_digest: cfg.digest(),
        model_digest: model.digest_hex(),
        seed: t.seed,
        precision: t.precision,
        param_count: model.param_count(),
        input,
        train_clips: train_idx.len(),
        val_clips: val_idx.len(),
        test_clips: test_idx.len(),
        threads: rayon::current_num_threads(),
        decisions: decisions(cfg),
    };
    Ok(TrainOutcome {
        result: RunResult {
            records,
            test,
            truncated,
            metadata,
        },
        model,
    })
}

/// Writes `result.json`, `curves.csv`, `model.vfck` and `config.toml` into `dir`.
pub fn persist_run(dir: &Path, cfg: &ExperimentConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("result.json");
    fs::write(&path, outcome.result.to_json()).map_err(io_err(&path))?;
    write_curves(&dir.join("curves.csv"), &outcome.result.records)?;
    outcome.model.save(dir.join("model.vfck"))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    Ok(())
}
