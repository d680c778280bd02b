use serde::{Deserialize, Serialize};

use super::{Init, LayerNorm, Linear, LinearInit, NnError, ParamStore, Result, Session};
use crate::tensor::{TensorError, Var};

const PROJ_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, head_dim: usize) -> Result<Self> {
        let cfg = Self { dim, heads, head_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(NnError::Config(format!(
                "attention extents must be positive: dim {}, heads {}, head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Width of the concatenated heads.
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Scaled dot-product self-attention over `[N×S×d]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    cfg: AttentionConfig,
    sign_flip_fault: bool,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let inner = cfg.inner();
        let qkv = Linear::new(
            store,
            init,
            &format!("{name}.qkv"),
            cfg.dim,
            3 * inner,
            true,
            LinearInit::TruncNormal(PROJ_STD),
        )?;
        let out = Linear::new(
            store,
            init,
            &format!("{name}.out"),
            inner,
            cfg.dim,
            true,
            LinearInit::TruncNormal(PROJ_STD),
        )?;
        Ok(Self {
            qkv,
            out,
            cfg,
            sign_flip_fault: false,
        })
    }

    pub fn config(&self) -> AttentionConfig {
        self.cfg
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out
    }

    pub fn qkv_proj(&self) -> &Linear {
        &self.qkv
    }

    /// Corrupts the backward rule through the attention weights. Only for
    /// demonstrating that the gradient checker catches faults.
    pub fn inject_sign_flip(&mut self) {
        self.sign_flip_fault = true;
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count() + self.out.param_count()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(s, x)?.0)
    }

    /// Output plus the attention matrices, shaped `[N·h × S × S]`.
    pub fn forward_with_weights<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.dim {
            return Err(NnError::Tensor(TensorError::Dimension {
                op: "attention",
                detail: format!("expected [N, S, {}], got {shape:?}", self.cfg.dim),
            }));
        }
        let (n, seq) = (shape[0], shape[1]);
        if seq == 0 {
            return Err(NnError::Tensor(TensorError::Contract(
                "attention over an empty sequence".into(),
            )));
        }
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim);
        let qkv = self
            .qkv
            .forward(s, x)?
            .reshape([n, seq, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?; // [3, N, h, S, dh]
        let part = |i: usize| -> Result<Var<'t>> { Ok(qkv.narrow(0, i, 1)?.reshape([n * h, seq, dh])?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q
            .bmm(k.permute(&[0, 2, 1])?)?
            .scale(1.0 / (dh as f64).sqrt());
        let mut weights = scores.softmax(2)?;
        if self.sign_flip_fault {
            weights = weights.grad_sign_flip();
        }
        let ctx = weights
            .bmm(v)?
            .reshape([n, h, seq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape([n, seq, h * dh])?;
        Ok((self.out.forward(s, ctx)?, weights))
    }
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `+ MLP(LN(·))` with GELU.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: AttentionConfig,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if mlp_ratio == 0 {
            return Err(NnError::Config("MLP expansion ratio must be positive".into()));
        }
        let d = cfg.dim;
        let hidden = mlp_ratio * d;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), d, hidden, true, LinearInit::TruncNormal(PROJ_STD))?,
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, d, true, LinearInit::TruncNormal(PROJ_STD))?,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn attention_mut(&mut self) -> &mut MultiHeadAttention {
        &mut self.attn
    }

    pub fn mlp_out(&self) -> &Linear {
        &self.fc2
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count()
            + self.attn.param_count()
            + self.ln2.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.add(self.attn.forward(s, self.ln1.forward(s, x)?)?)?;
        let m = self.fc1.forward(s, self.ln2.forward(s, h)?)?.gelu();
        Ok(h.add(self.fc2.forward(s, m)?)?)
    }
}

/// Stack of [`TransformerBlock`]s followed by a final LayerNorm.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: AttentionConfig,
        depth: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(NnError::Config(format!("encoder `{name}` needs at least one block")));
        }
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, init, &format!("{name}.block{i}"), cfg, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.dim)?;
        Ok(Self { blocks, norm })
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn inject_attention_fault(&mut self) {
        for b in &mut self.blocks {
            b.attention_mut().inject_sign_flip();
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(TransformerBlock::param_count).sum::<usize>() + self.norm.param_count()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        self.norm.forward(s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tape, Tensor};

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut init = Init::new(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, init.uniform(&shape, 0.5)).unwrap();
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let cfg = AttentionConfig::new(8, 2, 4).unwrap();
        let attn = MultiHeadAttention::new(&mut store, &mut init, "a", cfg).unwrap();
        randomize(&mut store, 2);
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        let x = tape.constant(Tensor::from_fn([1, 1, 8], |i| i as f64 * 0.1 - 0.3));
        let (y, w) = attn.forward_with_weights(&s, x).unwrap();
        assert!(w.value().data().iter().all(|&v| v == 1.0));

        // value projection then output projection, computed without attention
        let qkv = attn.qkv_proj().forward(&s, x).unwrap().value();
        let v = tape.constant(Tensor::new([1, 1, 8], qkv.data()[16..24].to_vec()).unwrap());
        let want = attn.out_proj().forward(&s, v).unwrap().value();
        assert!(y.value().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let attn = MultiHeadAttention::new(&mut store, &mut init, "a", AttentionConfig::new(6, 3, 2).unwrap()).unwrap();
        randomize(&mut store, 5);
        let token: Vec<f64> = (0..6).map(|i| (i as f64).cos()).collect();
        let x = Tensor::new([1, 4, 6], token.repeat(4)).unwrap();
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        let y = attn.forward(&s, tape.constant(x)).unwrap().value();
        for pos in 1..4 {
            assert_eq!(&y.data()[..6], &y.data()[pos * 6..(pos + 1) * 6]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let attn = MultiHeadAttention::new(&mut store, &mut init, "a", AttentionConfig::new(8, 2, 4).unwrap()).unwrap();
        randomize(&mut store, 6);
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        let x = tape.constant(Tensor::from_fn([3, 5, 8], |i| ((i * 13) % 7) as f64 - 3.0));
        let (_, w) = attn.forward_with_weights(&s, x).unwrap();
        let w = w.value();
        for row in w.data().chunks(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn fresh_block_stays_near_its_input() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let block = TransformerBlock::new(&mut store, &mut init, "b", AttentionConfig::new(12, 3, 4).unwrap(), 4).unwrap();
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        let x = Tensor::from_fn([2, 3, 12], |i| (i as f64 * 0.7).sin());
        let y = block.forward(&s, tape.constant(x.clone())).unwrap().value();
        assert_ne!(y, x);
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = Tensor::from_fn([2, 3, 12], |i| y.data()[i] - x.data()[i]);
        assert!(norm(&diff) < 0.1 * norm(&x), "{} vs {}", norm(&diff), norm(&x));
    }

    #[test]
    fn block_preserves_shape() {
        for (n, seq, d) in [(1, 1, 4), (2, 7, 8), (3, 17, 12)] {
            let mut store = ParamStore::new();
            let block = TransformerBlock::new(&mut store, &mut Init::new(0), "b", AttentionConfig::new(d, 2, 3).unwrap(), 4).unwrap();
            let tape = Tape::new(Precision::Double);
            let s = Session::eval(&tape, &store);
            let y = block.forward(&s, tape.constant(Tensor::zeros([n, seq, d]))).unwrap();
            assert_eq!(y.shape(), vec![n, seq, d]);
        }
    }

    #[test]
    fn rejects_wrong_model_dim() {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, &mut Init::new(0), "a", AttentionConfig::new(8, 2, 4).unwrap()).unwrap();
        let tape = Tape::new(Precision::Double);
        let s = Session::eval(&tape, &store);
        assert!(attn.forward(&s, tape.constant(Tensor::zeros([1, 2, 6]))).is_err());
        assert!(AttentionConfig::new(8, 0, 4).is_err());
    }
}
