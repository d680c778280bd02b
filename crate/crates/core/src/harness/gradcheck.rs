//! Finite-difference verification of every differentiable op, every layer
//! and both micro-scale models.

use std::error::Error;
use std::time::Instant;

use serde::Serialize;

use super::Result;
use crate::models::{InputShape, Model, ModelConfig, R2Plus1DConfig, ViViTConfig};
use crate::nn::{
    AttentionConfig, BatchNorm, Conv2Plus1d, Conv2Plus1dConfig, Conv3d, Dropout, Encoder, Init, LayerNorm, Linear,
    LinearInit, Mode, MultiHeadAttention, ParamKind, ParamStore, PatchEmbed, Session, TransformerBlock, NORM_EPS,
};
use crate::tensor::{grad_check, Conv3dSpec, GradCheckOptions, GradCheckReport, Tape, Tensor, TensorError, Var};

type BoxResult<T> = std::result::Result<T, Box<dyn Error + Send + Sync>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Op,
    Layer,
    Model,
}

/// Registered components in report order.
pub const COMPONENTS: [(&str, ComponentKind); 26] = [
    ("add", ComponentKind::Op),
    ("mul", ComponentKind::Op),
    ("unary", ComponentKind::Op),
    ("relu", ComponentKind::Op),
    ("reductions", ComponentKind::Op),
    ("matmul", ComponentKind::Op),
    ("bmm", ComponentKind::Op),
    ("shape_ops", ComponentKind::Op),
    ("softmax", ComponentKind::Op),
    ("layer_norm", ComponentKind::Op),
    ("batch_norm", ComponentKind::Op),
    ("conv3d", ComponentKind::Op),
    ("bce", ComponentKind::Op),
    ("linear", ComponentKind::Layer),
    ("conv3d_layer", ComponentKind::Layer),
    ("conv2plus1d", ComponentKind::Layer),
    ("layer_norm_layer", ComponentKind::Layer),
    ("batch_norm_layer", ComponentKind::Layer),
    ("dropout", ComponentKind::Layer),
    ("attention", ComponentKind::Layer),
    ("transformer_block", ComponentKind::Layer),
    ("encoder", ComponentKind::Layer),
    ("patch_embed", ComponentKind::Layer),
    ("classifier_head", ComponentKind::Layer),
    ("r2plus1d", ComponentKind::Model),
    ("vivit", ComponentKind::Model),
];

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    /// Entries sampled per parameter tensor of the full models.
    pub model_entries: usize,
    /// Entries sampled per tensor of the attention stacks.
    pub layer_entries: usize,
    /// Propagate sign-flipped gradients through every attention softmax.
    pub inject_attention_fault: bool,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            check: GradCheckOptions::double(),
            model_entries: 4,
            layer_entries: 24,
            inject_attention_fault: false,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub kind: ComponentKind,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentReport>> {
    COMPONENTS.iter().map(|&(name, _)| run_component(name, opts)).collect()
}

pub fn run_component(name: &str, opts: &SuiteOptions) -> Result<ComponentReport> {
    let (name, kind) = *COMPONENTS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| super::HarnessError::Config(format!("no gradient-check component `{name}`")))?;
    let start = Instant::now();
    let report = check(name, opts)?;
    Ok(ComponentReport {
        name,
        kind,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fixed pseudo-random weights turning an output into a scalar.
fn projection(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (i as f64 * 0.754_877_666_2 + 0.1).fract() - 0.5)
}

fn project(y: Var<'_>) -> std::result::Result<Var<'_>, TensorError> {
    Ok(y.mul_const(&projection(&y.shape()))?.sum())
}

fn contract(e: Box<dyn Error + Send + Sync>) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Pushes every trainable value off its initialization so zero-initialized
/// projections do not hide upstream gradients.
fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut init = Init::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let e = store.entry(id);
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let noise = init.uniform(e.value.shape(), scale);
        let value = Tensor::from_fn(e.value.shape().to_vec(), |i| e.value.data()[i] + noise.data()[i]);
        store.set(id, value).expect("same shape");
    }
}

/// Checks `f(session, x)` with the input and every trainable entry of
/// `store` as differentiated inputs; buffers stay constant.
fn check_store<F>(store: &ParamStore, x: Tensor, mode: Mode, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Session<'t>, Var<'t>) -> BoxResult<Var<'t>>,
{
    let mut inputs = vec![("x".to_string(), x)];
    for e in store.entries().iter().filter(|e| e.kind == ParamKind::Trainable) {
        inputs.push((e.name.clone(), e.value.clone()));
    }
    Ok(grad_check(&inputs, |t, v| bind_and_run(store, t, v, mode, &f), opts)?)
}

fn bind_and_run<'t, F>(
    store: &ParamStore,
    tape: &'t Tape,
    vars: &[Var<'t>],
    mode: Mode,
    f: &F,
) -> std::result::Result<Var<'t>, TensorError>
where
    F: for<'a> Fn(&Session<'a>, Var<'a>) -> BoxResult<Var<'a>>,
{
    let mut trainable = vars[1..].iter();
    let bound = store
        .entries()
        .iter()
        .map(|e| match e.kind {
            ParamKind::Trainable => *trainable.next().expect("one var per trainable"),
            ParamKind::Buffer => tape.constant(e.value.clone()),
        })
        .collect();
    let s = Session::with_vars(tape, bound, mode, 5);
    f(&s, vars[0]).map_err(contract)
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Values in `[-1, -0.1] ∪ [0.1, 1]`, away from the ReLU kink.
fn off_zero(init: &mut Init, shape: &[usize]) -> Tensor {
    let u = init.uniform(shape, 1.0);
    u.map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

fn micro_input() -> InputShape {
    InputShape::new(3, 4, 16, 16)
}

fn check(name: &str, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let o = &opts.check;
    let mut init = Init::new(opts.seed);
    let mut rand = |shape: &[usize]| init.uniform(shape, 1.0);
    let report = match name {
        "add" => grad_check(
            &named(vec![("a", rand(&[2, 3, 4])), ("b", rand(&[3, 4]))]),
            |_, v| project(v[0].add(v[1])?.sub(v[1].scale(0.5))?),
            o,
        )?,
        "mul" => grad_check(
            &named(vec![("a", rand(&[2, 3, 4])), ("b", rand(&[4]))]),
            |_, v| project(v[0].mul(v[1])?.square().add_scalar(0.3).neg()),
            o,
        )?,
        "unary" => grad_check(
            &named(vec![("x", rand(&[3, 5]))]),
            |_, v| {
                let x = v[0];
                let a = x.exp().add(x.tanh())?;
                let b = x.square().add_scalar(1.0).ln().add(x.sigmoid())?;
                project(a.add(b)?.add(x.gelu())?)
            },
            o,
        )?,
        "relu" => {
            let x = off_zero(&mut init, &[4, 6]);
            grad_check(&named(vec![("x", x)]), |_, v| project(v[0].relu()), o)?
        }
        "reductions" => grad_check(
            &named(vec![("x", rand(&[2, 3, 4]))]),
            |_, v| {
                let a = v[0].sum_axis(1)?.square().sum();
                let b = v[0].mean_axis(2)?.exp().mean();
                Ok(a.add(b)?)
            },
            o,
        )?,
        "matmul" => grad_check(
            &named(vec![("a", rand(&[5, 4])), ("b", rand(&[4, 6]))]),
            |_, v| project(v[0].matmul(v[1])?),
            o,
        )?,
        "bmm" => grad_check(
            &named(vec![("a", rand(&[2, 3, 4])), ("b", rand(&[2, 4, 5]))]),
            |_, v| project(v[0].bmm(v[1])?),
            o,
        )?,
        "shape_ops" => grad_check(
            &named(vec![("a", rand(&[2, 3, 4])), ("b", rand(&[2, 1, 4]))]),
            |_, v| {
                let p = v[0].permute(&[2, 0, 1])?.reshape([4, 6])?;
                let c = Var::concat(&[v[0], v[1]], 1)?.narrow(1, 1, 3)?;
                let e = v[1].reshape([2, 4])?.expand_leading(3)?;
                Ok(project(p)?.add(project(c)?)?.add(project(e)?)?)
            },
            o,
        )?,
        "softmax" => grad_check(
            &named(vec![("x", rand(&[2, 3, 5]).map(|v| 3.0 * v))]),
            |_, v| Ok(project(v[0].softmax(2)?)?.add(project(v[0].softmax(1)?)?)?),
            o,
        )?,
        "layer_norm" => grad_check(
            &named(vec![("x", rand(&[2, 3, 6])), ("gamma", rand(&[6])), ("beta", rand(&[6]))]),
            |_, v| project(v[0].layer_norm(v[1], v[2], NORM_EPS)?),
            o,
        )?,
        "batch_norm" => grad_check(
            &named(vec![("x", rand(&[3, 2, 5])), ("gamma", rand(&[2])), ("beta", rand(&[2]))]),
            |_, v| project(v[0].batch_norm_train(v[1], v[2], NORM_EPS)?.0),
            o,
        )?,
        "conv3d" => grad_check(
            &named(vec![("x", rand(&[2, 2, 4, 5, 5])), ("w", rand(&[3, 2, 3, 3, 3]))]),
            |_, v| project(v[0].conv3d(v[1], Conv3dSpec::new([1, 2, 2], [1, 1, 1]))?),
            o,
        )?,
        "bce" => {
            let targets = Tensor::new([6], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
            grad_check(
                &named(vec![("logits", rand(&[6]).map(|v| 3.0 * v))]),
                move |_, v| v[0].sigmoid().binary_cross_entropy(&targets, 1e-7),
                o,
            )?
        }
        _ => check_layer_or_model(name, opts)?,
    };
    Ok(report)
}

fn check_layer_or_model(name: &str, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Init::new(opts.seed);
    let o = &opts.check;
    let stack = o.clone().with_max_entries(opts.layer_entries);
    let attention = AttentionConfig::new(8, 2, 4)?;
    let fault = opts.inject_attention_fault;
    let report = match name {
        "linear" => {
            let l = Linear::new(&mut store, &mut init, "fc", 5, 3, true, LinearInit::TruncNormal(0.5))?;
            let x = init.uniform(&[2, 4, 5], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(l.forward(s, x)?)?))?
        }
        "conv3d_layer" => {
            let c = Conv3d::new(&mut store, &mut init, "conv", 2, 3, [3, 3, 3], Conv3dSpec::new([1, 1, 1], [1, 1, 1]))?;
            let x = init.uniform(&[2, 2, 3, 4, 4], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(c.forward(s, x)?)?))?
        }
        "conv2plus1d" => {
            let mut cfg = Conv2Plus1dConfig::cubic(2, 4, 3, 1, 1);
            cfg.spatial_stride = 2;
            let c = Conv2Plus1d::new(&mut store, &mut init, "conv", cfg)?;
            perturb(&mut store, opts.seed, 0.05);
            let x = init.uniform(&[2, 2, 3, 6, 6], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(c.forward(s, x)?)?))?
        }
        "layer_norm_layer" => {
            let ln = LayerNorm::new(&mut store, "ln", 6)?;
            perturb(&mut store, opts.seed, 0.3);
            let x = init.uniform(&[3, 6], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(ln.forward(s, x)?)?))?
        }
        "batch_norm_layer" => {
            let bn = BatchNorm::new(&mut store, "bn", 3)?;
            perturb(&mut store, opts.seed, 0.3);
            let x = init.uniform(&[2, 3, 2, 2, 2], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(bn.forward(s, x)?)?))?
        }
        "dropout" => {
            let d = Dropout::new(0.3)?;
            let x = init.uniform(&[4, 8], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(d.forward(s, x)?)?))?
        }
        "attention" => {
            let mut a = MultiHeadAttention::new(&mut store, &mut init, "attn", attention)?;
            if fault {
                a.inject_sign_flip();
            }
            perturb(&mut store, opts.seed, 0.3);
            let x = init.uniform(&[2, 5, 8], 1.0);
            check_store(&store, x, Mode::Train, &stack, |s, x| Ok(project(a.forward(s, x)?)?))?
        }
        "transformer_block" => {
            let mut b = TransformerBlock::new(&mut store, &mut init, "block", attention, 2)?;
            if fault {
                b.attention_mut().inject_sign_flip();
            }
            perturb(&mut store, opts.seed, 0.3);
            let x = init.uniform(&[2, 5, 8], 1.0);
            check_store(&store, x, Mode::Train, &stack, |s, x| Ok(project(b.forward(s, x)?)?))?
        }
        "encoder" => {
            let mut e = Encoder::new(&mut store, &mut init, "enc", attention, 2, 2)?;
            if fault {
                e.inject_attention_fault();
            }
            perturb(&mut store, opts.seed, 0.3);
            let x = init.uniform(&[2, 4, 8], 1.0);
            check_store(&store, x, Mode::Train, &stack, |s, x| Ok(project(e.forward(s, x)?)?))?
        }
        "patch_embed" => {
            let p = PatchEmbed::new(&mut store, &mut init, "patch", 2, 4, 6, 2, 5)?;
            perturb(&mut store, opts.seed, 0.1);
            let x = init.uniform(&[3, 2, 4, 6], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| Ok(project(p.forward(s, x)?)?))?
        }
        "classifier_head" => {
            // fc1 → GELU → dropout → fc2 → sigmoid, as in the ViViT head
            let fc1 = Linear::new(&mut store, &mut init, "fc1", 6, 4, true, LinearInit::TruncNormal(0.5))?;
            let fc2 = Linear::new(&mut store, &mut init, "fc2", 4, 1, true, LinearInit::TruncNormal(0.5))?;
            let drop = Dropout::new(0.2)?;
            let x = init.uniform(&[5, 6], 1.0);
            check_store(&store, x, Mode::Train, o, |s, x| {
                let h = drop.forward(s, fc1.forward(s, x)?.gelu())?;
                Ok(project(fc2.forward(s, h)?.sigmoid())?)
            })?
        }
        "r2plus1d" | "vivit" => return check_model(name, opts),
        other => unreachable!("component `{other}` is registered but has no check"),
    };
    Ok(report)
}

fn check_model(name: &str, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let config = if name == "r2plus1d" {
        ModelConfig::R2Plus1D(R2Plus1DConfig {
            width_multiplier: 0.125,
            ..R2Plus1DConfig::default()
        })
    } else {
        let mut c = ViViTConfig::new(32, 2, 16, 4);
        c.dropout = 0.2;
        ModelConfig::ViViT(c)
    };
    let input = micro_input();
    let mut model = Model::build(&config, input, opts.seed)?;
    if opts.inject_attention_fault && name == "vivit" {
        model.inject_attention_fault()?;
    }
    if name == "vivit" {
        // zero-initialized output projections would hide the attention path
        perturb(model.store_mut(), opts.seed, 0.05);
    }
    let x = Init::new(opts.seed + 1).uniform(&input.batch_shape(4), 0.5).map(|v| v + 0.5);
    let labels = Tensor::new([4], vec![1.0, 0.0, 1.0, 0.0])?;
    // thousands of ReLUs: entries whose probes straddle a kink get a finer step
    let o = opts.check.clone().with_min_eps(1e-8).with_max_entries(opts.model_entries);
    let model = &model;
    check_store(model.store(), x, Mode::Train, &o, move |s, x| {
        Ok(model.forward(s, x)?.binary_cross_entropy(&labels, 1e-7)?)
    })
}
