mod plot;
mod runcfg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vf_core::data::{synth_generate, ArtifactKind, ClipGeometry, Manifest, Split, SplitRatios, SynthSpec};
use vf_core::harness::{
    self, evaluate_split, persist_run, read_curves, sweep_frames, train_with, ExperimentConfig, Scale,
    WallClock, DEFAULT_FRAME_COUNTS,
};
use vf_core::harness::gradcheck::SuiteOptions;
use vf_core::models::{InputShape, Model};

use runcfg::Source;

/// Invalid flags or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(e: impl fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

enum Status {
    Done,
    Truncated,
}

#[derive(Parser)]
#[command(name = "vf", version, about = "Train and evaluate small video deepfake detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face-swap dataset.
    GenData(GenDataArgs),
    /// Train a model from a preset or config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks for every layer and both models.
    Gradcheck(GradcheckArgs),
    /// Train once per frame count and report the lowest-loss setting.
    SweepFrames(SweepArgs),
    /// Render learning curves as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 160)]
    count: usize,
    #[arg(long, default_value_t = 0.5)]
    fake_frac: f64,
    #[arg(long, default_value = "both")]
    artifact: ArtifactKind,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per clip.
    #[arg(long, default_value_t = 25)]
    frames: usize,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Bundled preset (cnn-a, cnn-b, vit-1 ... vit-4).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, `key=value` or `section.key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Rescale the model and frame count (micro, desk, paper).
    #[arg(long)]
    scale: Option<Scale>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Wall-clock ceiling in minutes.
    #[arg(long)]
    budget_min: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Run config; defaults to config.toml beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the metrics file; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Attention,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check only these components.
    #[arg(long = "component")]
    components: Vec<String>,
    /// Deliberately corrupt a backward rule to confirm the check catches it.
    #[arg(long)]
    inject_sign_flip: Option<Fault>,
    /// Sampled entries per parameter tensor of the full models.
    #[arg(long, default_value_t = 4)]
    model_entries: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRAME_COUNTS)]
    counts: Vec<usize>,
}

#[derive(Args)]
struct PlotArgs {
    curves: PathBuf,
    /// Second curves file drawn dashed.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Truncated) => {
            eprintln!("stopped early: wall-clock budget exhausted");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("VF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("VF_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<Status> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SweepFrames(a) => sweep(a),
        Command::Plot(a) => plot(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<Status> {
    let spec = SynthSpec {
        count: a.count,
        fake_fraction: a.fake_frac,
        artifact: a.artifact,
        strength: a.strength,
        seed: a.seed,
        geometry: ClipGeometry::new(a.frames, 3, a.size, a.size),
        ratios: SplitRatios::default(),
        ..SynthSpec::default()
    };
    spec.validate().map_err(usage)?;
    let manifest = synth_generate(&spec, &a.out)?;
    println!(
        "wrote {} clips ({} fake, {}) to {}",
        manifest.entries.len(),
        spec.fake_count(),
        manifest.geometry,
        a.out.display()
    );
    Ok(Status::Done)
}

struct Prepared {
    cfg: ExperimentConfig,
    manifest: Manifest,
    out: PathBuf,
}

fn prepare(exp: &ExperimentArgs) -> Result<Prepared> {
    let source = match (&exp.preset, &exp.config) {
        (Some(p), _) => Source::Preset(p),
        (None, Some(c)) => Source::File(c),
        (None, None) => bail!(usage("either --preset or --config is required")),
    };
    let rc = runcfg::load(source, exp.scale, &exp.sets)?;
    let mut cfg = rc.experiment;
    if let Some(b) = exp.budget_min {
        if !(b > 0.0) {
            bail!(usage(format!("--budget-min must be positive, got {b}")));
        }
        cfg.train.budget_min = b;
    }
    let data = exp
        .data
        .clone()
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| usage("no dataset: pass --data or set data.manifest"))?;
    let manifest = Manifest::load(&data).with_context(|| format!("cannot load dataset {}", data.display()))?;
    cfg.data.manifest = Some(data);
    let out = exp
        .out
        .clone()
        .or(rc.output)
        .ok_or_else(|| usage("no output directory: pass --out or set output.dir"))?;
    Ok(Prepared { cfg, manifest, out })
}

fn train(a: TrainArgs) -> Result<Status> {
    let Prepared { cfg, manifest, out } = prepare(&a.exp)?;
    let outcome = train_with(&cfg, &manifest, &WallClock::start(), &mut |_| {})?;
    persist_run(&out, &cfg, &outcome)?;
    let r = &outcome.result;
    println!(
        "{}: {} episodes, test accuracy {:.4}, test loss {:.4}; results in {}",
        cfg.name,
        r.records.len(),
        r.test.accuracy,
        r.test.loss,
        out.display()
    );
    Ok(if r.truncated { Status::Truncated } else { Status::Done })
}

fn eval(a: EvalArgs) -> Result<Status> {
    let dir = a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let config_path = a.config.clone().unwrap_or_else(|| dir.join("config.toml"));
    let text = fs::read_to_string(&config_path)
        .with_context(|| format!("cannot read run config {}", config_path.display()))?;
    let cfg = ExperimentConfig::from_toml(&text).with_context(|| config_path.display().to_string())?;
    let manifest = Manifest::load(&a.data).with_context(|| format!("cannot load dataset {}", a.data.display()))?;
    let g = manifest.geometry;
    let input = InputShape::new(g.channels, cfg.data.frames, g.height, g.width);
    let model = Model::load(&a.checkpoint, &cfg.model, input)
        .with_context(|| format!("checkpoint {} does not match {}", a.checkpoint.display(), config_path.display()))?;
    let m = evaluate_split(&model, &manifest, a.split, cfg.data.frames, cfg.train.batch_size, cfg.train.precision)?;
    let fmt_opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("split: {} ({} clips)", a.split, m.count);
    println!("accuracy: {:.4}", m.accuracy);
    println!("precision (fake): {}", fmt_opt(m.precision));
    println!("recall (fake): {}", fmt_opt(m.recall));
    println!("mean loss: {:.4}", m.loss);
    println!("confusion (rows actual, cols predicted; real, fake):");
    for row in m.confusion {
        println!("  {:>6} {:>6}", row[0], row[1]);
    }
    let out = a.out.unwrap_or(dir);
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join(format!("eval-{}.json", a.split));
    fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(Status::Done)
}

fn gradcheck(a: GradcheckArgs) -> Result<Status> {
    let opts = SuiteOptions {
        model_entries: a.model_entries,
        inject_attention_fault: matches!(a.inject_sign_flip, Some(Fault::Attention)),
        ..SuiteOptions::default()
    };
    let names: Vec<&str> = if a.components.is_empty() {
        harness::gradcheck::COMPONENTS.iter().map(|(n, _)| *n).collect()
    } else {
        a.components.iter().map(String::as_str).collect()
    };
    let mut failed = 0;
    println!("{:<20} {:<6} {:>12} {:>9}  result", "component", "kind", "max rel err", "seconds");
    for name in names {
        let r = harness::gradcheck::run_component(name, &opts).map_err(usage)?;
        if !r.passed() {
            failed += 1;
        }
        let worst = r.report.worst().map_or(String::new(), |w| format!(" (worst: {})", w.name));
        println!(
            "{:<20} {:<6} {:>12.3e} {:>9.2}  {}{}",
            r.name,
            format!("{:?}", r.kind).to_lowercase(),
            r.report.max_rel_err,
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" },
            worst
        );
    }
    if failed > 0 {
        bail!("{failed} component(s) failed the gradient check");
    }
    println!("all components pass (tolerance {:e})", opts.check.tol);
    Ok(Status::Done)
}

fn sweep(a: SweepArgs) -> Result<Status> {
    let Prepared { cfg, manifest, out } = prepare(&a.exp)?;
    let report = sweep_frames(&cfg, &manifest, &a.counts, &mut |row| {
        log::info!("frames {}: test accuracy {:.4}, loss {:.4}", row.frames, row.accuracy, row.loss)
    })?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let table = report.to_table();
    fs::write(out.join("sweep.md"), &table)?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{table}");
    Ok(if report.rows.iter().any(|r| r.truncated) {
        Status::Truncated
    } else {
        Status::Done
    })
}

fn plot(a: PlotArgs) -> Result<Status> {
    let main = read_curves(&a.curves)?;
    let other = a.compare.as_deref().map(read_curves).transpose()?;
    let label = |p: &Path| p.display().to_string();
    let mut runs = vec![(label(&a.curves), main.as_slice())];
    if let (Some(path), Some(records)) = (&a.compare, &other) {
        runs.push((label(path), records.as_slice()));
    }
    let borrowed: Vec<(&str, &[_])> = runs.iter().map(|(l, r)| (l.as_str(), *r)).collect();
    let svg = plot::render_svg(&label(&a.curves), &borrowed);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, svg).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(Status::Done)
}
